#ifndef BRANCHCONNECT_ARCH_H_
#define BRANCHCONNECT_ARCH_H_

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "branchconnect/gates.h"
#include "branchconnect/ops.h"
#include "branchconnect/tensor.h"

namespace branchconnect {

// Architecture files are plain text, one layer per line, using the notation
// of the published configuration tables:
//
//   # comment
//   INPUT: 3x32x32          (or a flat vector size, e.g. "INPUT: 10")
//   INIT: Random | MSRA
//   CONV: 5x5,32            optional ",stride=S" and ",pad=P" (default pad keeps size)
//   POOL: 3x3,Max,2         window, Max|Ave, stride; optional ",pad=P"
//   POOL: global,Ave        global average pooling
//   LRN                     accepted and executed as identity
//   FC: 64
//
// A ReLU follows every CONV and every FC except the classifier layer.
// Branch network files add "M:", "K:" and the section markers STEM, BRANCH
// and HEAD; the head holds "FC_Gates: C" or "CONV_Gates: 1x1,C" followed by
// "POOL: global,Ave".

class ParseError : public Error {
 public:
  ParseError(int line, const std::string& message);
  int line() const { return line_; }

 private:
  int line_;
};

enum class LayerKind { kConv, kPool, kFullyConnected, kLrn };

struct LayerSpec {
  LayerKind kind = LayerKind::kConv;
  std::size_t kernel = 0;   // conv kernel edge, or pool window
  std::size_t outputs = 0;  // conv channels / fc units
  std::size_t stride = 1;
  std::size_t pad = 0;
  PoolKind pool = PoolKind::kMax;
  bool global = false;  // global average pool
  int line = 0;         // source line, 0 if synthesized

  bool SameLayer(const LayerSpec& other) const;
};

enum class InitScheme {
  kGaussian,  // "Random": N(0, 0.01^2) weights
  kMsra,      // N(0, 2 / fan_in) weights
};

LayerSpec ParseLayerLine(std::string_view text, int line);
std::string FormatLayer(const LayerSpec& layer);

/// Output shape after each layer, starting from `input` (CxHxW or D).
/// Throws ShapeError (ParseError when layers carry line numbers).
std::vector<Shape> InferShapes(const Shape& input, const std::vector<LayerSpec>& layers);

struct BaseArchSpec {
  Shape input_shape;
  InitScheme init = InitScheme::kGaussian;
  std::vector<LayerSpec> layers;
  std::vector<Shape> output_shapes;  // one per layer
  std::size_t conv_stages = 0;       // P_c
  std::size_t fc_layers = 0;         // P_f
  std::size_t num_classes = 0;
};

/// Groups layer indices into conv/pool stages: a CONV together with the POOL
/// and LRN layers that directly follow it. FC layers are not part of any stage.
std::vector<std::vector<std::size_t>> ConvStages(const std::vector<LayerSpec>& layers);

BaseArchSpec ParseArchSpec(std::string_view text, const Shape& default_input = {3, 32, 32});
std::string FormatArchSpec(const BaseArchSpec& spec);

struct BranchNetSpec {
  Shape input_shape;
  InitScheme init = InitScheme::kGaussian;
  std::vector<LayerSpec> stem;
  std::vector<LayerSpec> branch;
  HeadKind head = HeadKind::kFullyConnected;
  std::size_t num_classes = 0;
  std::size_t branches = 1;  // M
  std::size_t active = 1;    // K

  // Derived by Validate().
  Shape stem_output;
  Shape branch_output;
  /// Length (fc head) or channel count (conv head) of one branch output.
  std::size_t head_depth = 0;

  /// Recomputes derived shapes; throws on inconsistent layers or M/K.
  void Validate();
};

/// Stem = first P_c-1 stages, branch = last stage + first P_f-1 FC layers,
/// head = gated FC with C outputs. Conv-headed models (P_f = 0, ending in a
/// C-channel CONV and global average pooling) move the conv stage before the
/// head into the branch and gate the head convolution instead.
BranchNetSpec ReshapeToBranchConnect(const BaseArchSpec& base, std::size_t branches, std::size_t active);

BranchNetSpec ParseBranchNetSpec(std::string_view text);
std::string FormatBranchNetSpec(const BranchNetSpec& spec);

/// True when the text uses STEM/BRANCH/HEAD sections.
bool IsSectionedSpec(std::string_view text);

struct ParameterCounts {
  std::size_t stem = 0;
  std::size_t branch = 0;  // one branch
  std::size_t head = 0;
  std::size_t total = 0;   // stem + M * branch + head
  std::size_t gates = 0;   // C * M, not included in total
};

std::size_t CountLayerParameters(const Shape& input, const LayerSpec& layer);
std::size_t CountParameters(const BaseArchSpec& spec);
ParameterCounts CountParameters(const BranchNetSpec& spec);

std::string ReadTextFile(const std::string& path);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_ARCH_H_
