#include "branchconnect/arch.h"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "branchconnect/log.h"

namespace branchconnect {

ParseError::ParseError(int line, const std::string& message)
    : Error(line > 0 ? "line " + std::to_string(line) + ": " + message : message), line_(line) {}

namespace {

std::string Trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string Upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string ReplaceAll(std::string s, std::string_view from, std::string_view to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) {
    s.replace(pos, from.size(), to);
  }
  return s;
}

// Accepts "x", "X", the UTF-8 multiplication sign and the LaTeX form.
std::string NormalizeTimes(std::string s) {
  s = ReplaceAll(std::move(s), "$\\times$", "x");
  s = ReplaceAll(std::move(s), "\xC3\x97", "x");
  s = ReplaceAll(std::move(s), "X", "x");
  return s;
}

std::vector<std::string> SplitTrim(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.push_back(Trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::size_t ParseCount(const std::string& token, int line, const char* what) {
  std::size_t value = 0;
  const char* first = token.data();
  const char* last = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || token.empty()) {
    throw ParseError(line, std::string("invalid ") + what + " '" + token + "'");
  }
  return value;
}

std::size_t ParsePositive(const std::string& token, int line, const char* what) {
  const std::size_t v = ParseCount(token, line, what);
  if (v == 0) throw ParseError(line, std::string(what) + " must be positive");
  return v;
}

std::size_t ParseSquareKernel(const std::string& token, int line) {
  const std::vector<std::string> parts = SplitTrim(NormalizeTimes(token), 'x');
  if (parts.size() != 2) throw ParseError(line, "expected kernel as AxB, got '" + token + "'");
  const std::size_t a = ParsePositive(parts[0], line, "kernel size");
  const std::size_t b = ParsePositive(parts[1], line, "kernel size");
  if (a != b) throw ParseError(line, "only square kernels are supported, got '" + token + "'");
  return a;
}

Shape ParseShape(const std::string& token, int line) {
  Shape shape;
  for (const std::string& part : SplitTrim(NormalizeTimes(token), 'x')) {
    shape.push_back(ParsePositive(part, line, "input dimension"));
  }
  if (shape.size() != 1 && shape.size() != 3) {
    throw ParseError(line, "INPUT must be CxHxW or a vector length, got '" + token + "'");
  }
  return shape;
}

std::string FormatShape(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

// Parses "key=value" options trailing a CONV/POOL line.
void ApplyOption(LayerSpec& layer, const std::string& token, int line) {
  const std::size_t eq = token.find('=');
  if (eq == std::string::npos) throw ParseError(line, "unexpected token '" + token + "'");
  const std::string key = Upper(Trim(std::string_view(token).substr(0, eq)));
  const std::string value = Trim(std::string_view(token).substr(eq + 1));
  if (key == "STRIDE") {
    layer.stride = ParsePositive(value, line, "stride");
  } else if (key == "PAD") {
    layer.pad = ParseCount(value, line, "pad");
  } else {
    throw ParseError(line, "unknown option '" + key + "'");
  }
}

PoolKind ParsePoolKind(const std::string& token, int line) {
  const std::string t = Upper(token);
  if (t == "MAX") return PoolKind::kMax;
  if (t == "AVE" || t == "AVG" || t == "AVERAGE") return PoolKind::kAvg;
  throw ParseError(line, "unknown pooling kind '" + token + "'");
}

InitScheme ParseInit(const std::string& token, int line) {
  const std::string t = Upper(token);
  if (t == "RANDOM" || t == "GAUSSIAN") return InitScheme::kGaussian;
  if (t == "MSRA") return InitScheme::kMsra;
  throw ParseError(line, "unknown weight initialization '" + token + "'");
}

struct Line {
  int number;
  std::string key;    // upper-cased, before ':'
  std::string value;  // after ':'
  std::string text;   // trimmed line
};

std::vector<Line> Tokenize(std::string_view text) {
  std::vector<Line> lines;
  std::istringstream in{std::string(text)};
  std::string raw;
  int number = 0;
  while (std::getline(in, raw)) {
    ++number;
    const std::size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.resize(hash);
    std::string t = Trim(raw);
    if (t.empty()) continue;
    const std::size_t colon = t.find(':');
    Line l{number, Upper(Trim(std::string_view(t).substr(0, colon))), "", t};
    if (colon != std::string::npos) l.value = Trim(std::string_view(t).substr(colon + 1));
    lines.push_back(std::move(l));
  }
  return lines;
}

std::size_t FlatSize(const Shape& s) { return NumElements(s); }

}  // namespace

bool LayerSpec::SameLayer(const LayerSpec& o) const {
  return kind == o.kind && kernel == o.kernel && outputs == o.outputs && stride == o.stride && pad == o.pad &&
         pool == o.pool && global == o.global;
}

LayerSpec ParseLayerLine(std::string_view text, int line) {
  const std::string t = Trim(text);
  const std::size_t colon = t.find(':');
  const std::string key = Upper(Trim(std::string_view(t).substr(0, colon)));
  const std::string rest = colon == std::string::npos ? "" : Trim(std::string_view(t).substr(colon + 1));
  LayerSpec layer;
  layer.line = line;
  if (key == "LRN") {
    Warn("line " + std::to_string(line) + ": LRN is not implemented and runs as identity");
    layer.kind = LayerKind::kLrn;
    return layer;
  }
  if (colon == std::string::npos) throw ParseError(line, "unknown layer '" + t + "'");
  const std::vector<std::string> parts = SplitTrim(rest, ',');
  if (key == "CONV") {
    if (parts.size() < 2) throw ParseError(line, "CONV needs 'KxK,channels'");
    layer.kind = LayerKind::kConv;
    layer.kernel = ParseSquareKernel(parts[0], line);
    layer.outputs = ParsePositive(parts[1], line, "channel count");
    layer.pad = (layer.kernel - 1) / 2;
    for (std::size_t i = 2; i < parts.size(); ++i) ApplyOption(layer, parts[i], line);
    return layer;
  }
  if (key == "POOL") {
    layer.kind = LayerKind::kPool;
    if (!parts.empty() && Upper(parts[0]) == "GLOBAL") {
      if (parts.size() != 2 || ParsePoolKind(parts[1], line) != PoolKind::kAvg) {
        throw ParseError(line, "global pooling must be written 'POOL: global,Ave'");
      }
      layer.global = true;
      layer.pool = PoolKind::kAvg;
      return layer;
    }
    if (parts.size() < 3) throw ParseError(line, "POOL needs 'KxK,Max|Ave,stride'");
    layer.kernel = ParseSquareKernel(parts[0], line);
    layer.pool = ParsePoolKind(parts[1], line);
    layer.stride = ParsePositive(parts[2], line, "stride");
    for (std::size_t i = 3; i < parts.size(); ++i) ApplyOption(layer, parts[i], line);
    return layer;
  }
  if (key == "FC") {
    if (parts.size() != 1) throw ParseError(line, "FC needs a unit count");
    layer.kind = LayerKind::kFullyConnected;
    layer.outputs = ParsePositive(parts[0], line, "unit count");
    return layer;
  }
  throw ParseError(line, "unknown layer kind '" + key + "'");
}

std::string FormatLayer(const LayerSpec& layer) {
  std::ostringstream os;
  switch (layer.kind) {
    case LayerKind::kLrn:
      return "LRN";
    case LayerKind::kFullyConnected:
      os << "FC: " << layer.outputs;
      return os.str();
    case LayerKind::kConv:
      os << "CONV: " << layer.kernel << 'x' << layer.kernel << ',' << layer.outputs;
      if (layer.stride != 1) os << ",stride=" << layer.stride;
      if (layer.pad != (layer.kernel - 1) / 2) os << ",pad=" << layer.pad;
      return os.str();
    case LayerKind::kPool:
      if (layer.global) return "POOL: global,Ave";
      os << "POOL: " << layer.kernel << 'x' << layer.kernel << ','
         << (layer.pool == PoolKind::kMax ? "Max" : "Ave") << ',' << layer.stride;
      if (layer.pad != 0) os << ",pad=" << layer.pad;
      return os.str();
  }
  return {};
}

std::vector<Shape> InferShapes(const Shape& input, const std::vector<LayerSpec>& layers) {
  std::vector<Shape> shapes;
  Shape cur = input;
  for (const LayerSpec& layer : layers) {
    try {
      switch (layer.kind) {
        case LayerKind::kLrn:
          break;
        case LayerKind::kFullyConnected:
          cur = {layer.outputs};
          break;
        case LayerKind::kConv:
        case LayerKind::kPool: {
          const char* name = layer.kind == LayerKind::kConv ? "CONV" : "POOL";
          if (cur.size() != 3) {
            throw ShapeError(std::string(name) + " needs a CxHxW input, got " + ShapeString(cur));
          }
          if (layer.kind == LayerKind::kPool && layer.global) {
            cur = {cur[0]};
            break;
          }
          const std::size_t h = SlidingOutputSize(cur[1], layer.kernel, layer.stride, layer.pad, name);
          const std::size_t w = SlidingOutputSize(cur[2], layer.kernel, layer.stride, layer.pad, name);
          cur = {layer.kind == LayerKind::kConv ? layer.outputs : cur[0], h, w};
          break;
        }
      }
    } catch (const ShapeError& e) {
      if (layer.line > 0) throw ParseError(layer.line, e.what());
      throw;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

std::vector<std::vector<std::size_t>> ConvStages(const std::vector<LayerSpec>& layers) {
  std::vector<std::vector<std::size_t>> stages;
  bool open = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    switch (layers[i].kind) {
      case LayerKind::kConv:
        stages.push_back({i});
        open = true;
        break;
      case LayerKind::kPool:
      case LayerKind::kLrn:
        if (!open) {
          stages.push_back({});
          open = true;
        }
        stages.back().push_back(i);
        break;
      case LayerKind::kFullyConnected:
        open = false;
        break;
    }
  }
  return stages;
}

BaseArchSpec ParseArchSpec(std::string_view text, const Shape& default_input) {
  BaseArchSpec spec;
  spec.input_shape = default_input;
  for (const Line& l : Tokenize(text)) {
    if (l.key == "INPUT") {
      spec.input_shape = ParseShape(l.value, l.number);
    } else if (l.key == "INIT") {
      spec.init = ParseInit(l.value, l.number);
    } else if (l.key == "STEM" || l.key == "BRANCH" || l.key == "HEAD" || l.key == "M" || l.key == "K") {
      throw ParseError(l.number, "'" + l.key + "' belongs to a branch network file, not a base architecture");
    } else {
      spec.layers.push_back(ParseLayerLine(l.text, l.number));
    }
  }
  if (spec.layers.empty()) throw ParseError(0, "architecture has no layers");
  spec.output_shapes = InferShapes(spec.input_shape, spec.layers);

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    if (layer.kind == LayerKind::kFullyConnected) {
      ++spec.fc_layers;
    } else if (spec.fc_layers > 0 && layer.kind != LayerKind::kLrn) {
      throw ParseError(layer.line, "convolution or pooling after a fully connected layer");
    }
  }
  spec.conv_stages = ConvStages(spec.layers).size();

  const LayerSpec& last = spec.layers.back();
  if (last.kind == LayerKind::kFullyConnected) {
    spec.num_classes = last.outputs;
  } else if (last.kind == LayerKind::kPool && last.global && spec.layers.size() >= 2 &&
             spec.layers[spec.layers.size() - 2].kind == LayerKind::kConv) {
    spec.num_classes = spec.layers[spec.layers.size() - 2].outputs;
  } else {
    throw ParseError(last.line, "final layer must be FC, or CONV followed by 'POOL: global,Ave'");
  }
  return spec;
}

std::string FormatArchSpec(const BaseArchSpec& spec) {
  std::ostringstream os;
  os << "INPUT: " << FormatShape(spec.input_shape) << '\n';
  if (spec.init == InitScheme::kMsra) os << "INIT: MSRA\n";
  for (const LayerSpec& layer : spec.layers) os << FormatLayer(layer) << '\n';
  return os.str();
}

void BranchNetSpec::Validate() {
  if (branches < 1) throw Error("branch count M must be >= 1");
  if (active < 1 || active > branches) {
    throw Error("active connections K=" + std::to_string(active) + " must satisfy 1 <= K <= M=" +
                std::to_string(branches));
  }
  if (num_classes < 1) throw Error("head needs at least one class");
  if (branch.empty()) throw Error("branch template is empty");
  const std::vector<Shape> stem_shapes = InferShapes(input_shape, stem);
  stem_output = stem_shapes.empty() ? input_shape : stem_shapes.back();
  branch_output = InferShapes(stem_output, branch).back();
  if (head == HeadKind::kFullyConnected) {
    head_depth = FlatSize(branch_output);
  } else {
    if (branch_output.size() != 3) {
      throw ShapeError("conv gated head needs CxHxW branch outputs, got " + ShapeString(branch_output));
    }
    head_depth = branch_output[0];
  }
}

BranchNetSpec ReshapeToBranchConnect(const BaseArchSpec& base, std::size_t branches, std::size_t active) {
  const std::vector<std::vector<std::size_t>> stages = ConvStages(base.layers);
  BranchNetSpec out;
  out.input_shape = base.input_shape;
  out.init = base.init;
  out.num_classes = base.num_classes;
  out.branches = branches;
  out.active = active;

  auto append_stage = [&](std::vector<LayerSpec>& dst, const std::vector<std::size_t>& stage) {
    for (std::size_t i : stage) dst.push_back(base.layers[i]);
  };

  if (base.fc_layers > 0) {
    if (stages.empty()) throw Error("reshaping needs at least one convolutional/pooling stage (P_c >= 1)");
    for (std::size_t s = 0; s + 1 < stages.size(); ++s) append_stage(out.stem, stages[s]);
    append_stage(out.branch, stages.back());
    std::vector<LayerSpec> fcs;
    for (const LayerSpec& l : base.layers) {
      if (l.kind == LayerKind::kFullyConnected) fcs.push_back(l);
    }
    out.branch.insert(out.branch.end(), fcs.begin(), fcs.end() - 1);
    out.head = HeadKind::kFullyConnected;
  } else {
    // Conv-headed: the last stage is CONV(C) + global average pooling.
    if (stages.size() < 2) throw Error("reshaping a conv-headed model leaves an empty branch");
    const std::vector<std::size_t>& head_stage = stages.back();
    const LayerSpec& head_conv = base.layers[head_stage.front()];
    if (head_stage.size() != 2 || head_conv.kind != LayerKind::kConv || head_conv.kernel != 1) {
      throw Error("conv-headed model must end with a 1x1 CONV followed by 'POOL: global,Ave'");
    }
    for (std::size_t s = 0; s + 2 < stages.size(); ++s) append_stage(out.stem, stages[s]);
    append_stage(out.branch, stages[stages.size() - 2]);
    out.head = HeadKind::kConvGlobalAvg;
  }
  out.Validate();
  return out;
}

bool IsSectionedSpec(std::string_view text) {
  for (const Line& l : Tokenize(text)) {
    if (l.key == "STEM" || l.key == "BRANCH" || l.key == "HEAD") return true;
  }
  return false;
}

BranchNetSpec ParseBranchNetSpec(std::string_view text) {
  enum class Section { kPreamble, kStem, kBranch, kHead } section = Section::kPreamble;
  BranchNetSpec spec;
  spec.input_shape = {3, 32, 32};
  bool have_m = false, have_k = false, have_head = false, have_head_pool = false;
  int last_line = 0;
  for (const Line& l : Tokenize(text)) {
    last_line = l.number;
    if (l.key == "STEM") {
      section = Section::kStem;
    } else if (l.key == "BRANCH") {
      section = Section::kBranch;
    } else if (l.key == "HEAD") {
      section = Section::kHead;
    } else if (l.key == "INPUT") {
      spec.input_shape = ParseShape(l.value, l.number);
    } else if (l.key == "INIT") {
      spec.init = ParseInit(l.value, l.number);
    } else if (l.key == "M") {
      spec.branches = ParsePositive(l.value, l.number, "M");
      have_m = true;
    } else if (l.key == "K") {
      spec.active = ParsePositive(l.value, l.number, "K");
      have_k = true;
    } else if (section == Section::kStem) {
      spec.stem.push_back(ParseLayerLine(l.text, l.number));
    } else if (section == Section::kBranch) {
      spec.branch.push_back(ParseLayerLine(l.text, l.number));
    } else if (section == Section::kHead) {
      if (l.key == "FC_GATES") {
        spec.head = HeadKind::kFullyConnected;
        spec.num_classes = ParsePositive(l.value, l.number, "class count");
        have_head = true;
      } else if (l.key == "CONV_GATES") {
        const std::vector<std::string> parts = SplitTrim(l.value, ',');
        if (parts.size() != 2 || ParseSquareKernel(parts[0], l.number) != 1) {
          throw ParseError(l.number, "CONV_Gates must be written 'CONV_Gates: 1x1,C'");
        }
        spec.head = HeadKind::kConvGlobalAvg;
        spec.num_classes = ParsePositive(parts[1], l.number, "class count");
        have_head = true;
      } else if (l.key == "POOL" && have_head && spec.head == HeadKind::kConvGlobalAvg) {
        if (!ParseLayerLine(l.text, l.number).global) {
          throw ParseError(l.number, "conv gated head must be followed by 'POOL: global,Ave'");
        }
        have_head_pool = true;
      } else {
        throw ParseError(l.number, "unexpected line in HEAD section: '" + l.text + "'");
      }
    } else {
      throw ParseError(l.number, "layer outside of STEM/BRANCH/HEAD sections: '" + l.text + "'");
    }
  }
  if (!have_m || !have_k) throw ParseError(last_line, "branch network file needs 'M:' and 'K:' lines");
  if (!have_head) throw ParseError(last_line, "missing HEAD section with FC_Gates or CONV_Gates");
  if (spec.head == HeadKind::kConvGlobalAvg && !have_head_pool) {
    throw ParseError(last_line, "conv gated head must be followed by 'POOL: global,Ave'");
  }
  try {
    spec.Validate();
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(last_line, e.what());
  }
  return spec;
}

std::string FormatBranchNetSpec(const BranchNetSpec& spec) {
  std::ostringstream os;
  os << "INPUT: " << FormatShape(spec.input_shape) << '\n';
  if (spec.init == InitScheme::kMsra) os << "INIT: MSRA\n";
  os << "M: " << spec.branches << '\n' << "K: " << spec.active << '\n';
  os << "STEM\n";
  for (const LayerSpec& l : spec.stem) os << FormatLayer(l) << '\n';
  os << "BRANCH\n";
  for (const LayerSpec& l : spec.branch) os << FormatLayer(l) << '\n';
  os << "HEAD\n";
  if (spec.head == HeadKind::kFullyConnected) {
    os << "FC_Gates: " << spec.num_classes << '\n';
  } else {
    os << "CONV_Gates: 1x1," << spec.num_classes << '\n' << "POOL: global,Ave\n";
  }
  return os.str();
}

std::size_t CountLayerParameters(const Shape& input, const LayerSpec& layer) {
  switch (layer.kind) {
    case LayerKind::kConv:
      return layer.outputs * input.at(0) * layer.kernel * layer.kernel + layer.outputs;
    case LayerKind::kFullyConnected:
      return FlatSize(input) * layer.outputs + layer.outputs;
    case LayerKind::kPool:
    case LayerKind::kLrn:
      return 0;
  }
  return 0;
}

namespace {

std::size_t CountSequence(const Shape& input, const std::vector<LayerSpec>& layers) {
  const std::vector<Shape> shapes = InferShapes(input, layers);
  std::size_t total = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    total += CountLayerParameters(i == 0 ? input : shapes[i - 1], layers[i]);
  }
  return total;
}

}  // namespace

std::size_t CountParameters(const BaseArchSpec& spec) { return CountSequence(spec.input_shape, spec.layers); }

ParameterCounts CountParameters(const BranchNetSpec& spec) {
  ParameterCounts counts;
  counts.stem = CountSequence(spec.input_shape, spec.stem);
  counts.branch = CountSequence(spec.stem_output, spec.branch);
  counts.head = spec.head_depth * spec.num_classes + spec.num_classes;
  counts.total = counts.stem + spec.branches * counts.branch + counts.head;
  counts.gates = spec.num_classes * spec.branches;
  return counts;
}

std::string ReadTextFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace branchconnect
