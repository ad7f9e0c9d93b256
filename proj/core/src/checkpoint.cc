#include "branchconnect/checkpoint.h"

#include <cstring>
#include <fstream>
#include <iterator>

#include "branchconnect/arch.h"
#include "branchconnect/data.h"

namespace branchconnect {

namespace {

constexpr char kMagic[8] = {'B', 'C', 'C', 'K', 'P', 'T', '\0', '\0'};
constexpr const char* kMomentumPrefix = "momentum/";

class Writer {
 public:
  template <typename T>
  void Put(T value) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    bytes_.insert(bytes_.end(), buf, buf + sizeof(T));
  }
  void PutString(const std::string& s) {
    Put<std::uint64_t>(s.size());
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void PutTensor(const std::string& name, const Tensor& t) {
    PutString(name);
    Put<std::uint64_t>(t.rank());
    for (std::size_t d : t.shape()) Put<std::uint64_t>(d);
    for (Scalar v : t.data()) Put(v);
  }
  void PutRaw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> Take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T Get() {
    Need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string GetString() {
    const std::uint64_t n = Get<std::uint64_t>();
    Need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::pair<std::string, Tensor> GetTensor() {
    std::string name = GetString();
    const std::uint64_t rank = Get<std::uint64_t>();
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: tensor '" + name + "' has invalid rank");
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = Get<std::uint64_t>();
      if (d == 0 || d > (1ull << 32)) throw FormatError("checkpoint: tensor '" + name + "' has invalid shape");
      count *= d;
    }
    Need(count * sizeof(Scalar));
    std::vector<Scalar> data(count);
    std::memcpy(data.data(), bytes_.data() + pos_, count * sizeof(Scalar));
    pos_ += count * sizeof(Scalar);
    return {std::move(name), Tensor(std::move(shape), std::move(data))};
  }
  void GetRaw(void* dst, std::size_t n) {
    Need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool AtEnd() const { return pos_ == bytes_.size(); }

 private:
  void Need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint is truncated or corrupt");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> EncodeCheckpoint(const Checkpoint& ckpt) {
  const NetworkState& s = ckpt.state;
  Writer w;
  w.PutRaw(kMagic, sizeof(kMagic));
  w.Put<std::uint32_t>(kCheckpointVersion);
  w.Put<std::uint32_t>(sizeof(Scalar));
  w.PutString(FormatBranchNetSpec(s.spec));
  w.Put<std::uint64_t>(s.seed);
  w.Put<std::uint64_t>(s.iteration);
  w.Put<std::uint64_t>(s.parameters.size() + s.momentum.size() + ckpt.extras.size());
  for (const auto& [name, t] : s.parameters) w.PutTensor(name, t);
  for (const auto& [name, t] : s.momentum) w.PutTensor(kMomentumPrefix + name, t);
  for (const auto& [name, t] : ckpt.extras) w.PutTensor(name, t);
  const GateBank& g = s.gates;
  w.Put<std::uint64_t>(g.classes());
  w.Put<std::uint64_t>(g.branches());
  w.Put<std::uint64_t>(g.active());
  w.Put<std::uint8_t>(g.frozen() ? 1 : 0);
  for (Scalar v : g.real_values()) w.Put(v);
  w.PutRaw(g.binary_values().data(), g.binary_values().size());
  w.PutString(ckpt.rng_state);
  return w.Take();
}

Checkpoint DecodeCheckpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[sizeof(kMagic)];
  r.GetRaw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("not a branchconnect checkpoint");
  const auto version = r.Get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  if (r.Get<std::uint32_t>() != sizeof(Scalar)) throw FormatError("checkpoint was written with another precision");

  Checkpoint ckpt;
  NetworkState& s = ckpt.state;
  try {
    s.spec = ParseBranchNetSpec(r.GetString());
  } catch (const ParseError& e) {
    throw FormatError(std::string("checkpoint spec: ") + e.what());
  }
  s.seed = r.Get<std::uint64_t>();
  s.iteration = r.Get<std::uint64_t>();
  const auto count = r.Get<std::uint64_t>();
  const std::string prefix = kMomentumPrefix;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto [name, tensor] = r.GetTensor();
    if (name.rfind(prefix, 0) == 0) {
      s.momentum[name.substr(prefix.size())] = std::move(tensor);
    } else if (name.find('/') != std::string::npos) {
      ckpt.extras[name] = std::move(tensor);
    } else {
      s.parameters[name] = std::move(tensor);
    }
  }
  // Parameter shapes must match the spec.
  const NetworkState fresh = InitNetwork(s.spec, 0);
  for (const auto& [name, t] : fresh.parameters) {
    auto it = s.parameters.find(name);
    if (it == s.parameters.end() || it->second.shape() != t.shape()) {
      throw FormatError("checkpoint: parameter '" + name + "' missing or misshapen");
    }
    auto mt = s.momentum.find(name);
    if (mt == s.momentum.end() || mt->second.shape() != t.shape()) {
      throw FormatError("checkpoint: momentum for '" + name + "' missing or misshapen");
    }
  }
  if (s.parameters.size() != fresh.parameters.size()) throw FormatError("checkpoint: unexpected parameters");

  const auto classes = r.Get<std::uint64_t>();
  const auto branches = r.Get<std::uint64_t>();
  const auto active = r.Get<std::uint64_t>();
  if (classes != s.spec.num_classes || branches != s.spec.branches || active < 1 || active > branches) {
    throw FormatError("checkpoint: gate block does not match the network");
  }
  const bool frozen = r.Get<std::uint8_t>() != 0;
  std::vector<Scalar> real(classes * branches);
  for (Scalar& v : real) v = r.Get<Scalar>();
  std::vector<std::uint8_t> binary(classes * branches);
  r.GetRaw(binary.data(), binary.size());
  try {
    GateBank bank(classes, branches, active);
    bank.set_real_values(real);
    bank.set_binary_values(binary);
    bank.set_frozen(frozen);
    s.gates = std::move(bank);
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  ckpt.rng_state = r.GetString();
  if (!r.AtEnd()) throw FormatError("checkpoint has trailing bytes");
  return ckpt;
}

void SaveCheckpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::vector<std::uint8_t> bytes = EncodeCheckpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint LoadCheckpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return DecodeCheckpoint(bytes);
}

}  // namespace branchconnect
