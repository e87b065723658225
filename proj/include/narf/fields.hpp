#pragma once

// Radiance-field architectures over articulated objects.
//
//   PNERF   one MLP conditioned on all part twists
//   RTNERF  one MLP in the local frame of a single part
//   NARF_P  one RT-NeRF per part, blended by a softmax over densities
//   NARF_H  one MLP on the concatenation of every part's local inputs
//   NARF_D  NARF_H with each part's block scaled by a learned selector
//   DNARF   selector-weighted mapping to a canonical pose, then one MLP
//
// Per-part quantities are always laid out in the tree's pre-order.

#include "narf/autodiff.hpp"
#include "narf/encoding.hpp"
#include "narf/kinematics.hpp"
#include "narf/random.hpp"
#include "narf/tensor.hpp"

#include "json.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace narf {

enum class Architecture { PNeRF, RTNeRF, NarfP, NarfH, NarfD, DNarf };
enum class SelectorActivation { Softmax, Sigmoid };

std::string to_string(Architecture arch);
std::string to_string(SelectorActivation act);
// Accepts the lower-case names pnerf, rtnerf, narf_p, narf_h, narf_d, dnarf.
Architecture parse_architecture(std::string_view name);
SelectorActivation parse_selector_activation(std::string_view name);

struct FieldDescriptor {
  Architecture arch = Architecture::NarfD;
  KinematicTree tree;
  // Bone indices in the order their blocks appear; pre-order of `tree`.
  std::vector<std::size_t> part_order;
  EncodingConfig encoding;

  std::size_t depth = 4;
  std::size_t width = 64;
  std::size_t color_width = 32;
  // Trunk layer that re-receives the density input (0 = no skip).
  std::size_t skip_layer = 0;
  // Density = relu(density_scale * raw).
  double density_scale = 1.0;
  bool equalized_lr = true;

  double temperature = 100.0;  // NARF_P
  SelectorActivation selector_activation = SelectorActivation::Softmax;
  std::size_t selector_hidden = 10;

  // RT-NeRF variants.
  bool rt_color_twist = true;  // false: "without twist" ablation
  bool rt_global = false;      // true: RP-NeRF, global coordinates

  // Latent table; zero dims disable it.
  std::size_t latent_instances = 0;
  std::size_t latent_shape_dim = 0;
  std::size_t latent_appearance_dim = 0;

  // DNARF: per part (in part order) canonical frame origins.
  std::vector<Vec3> canonical_origins;

  // Fills part_order and, when empty, canonical origins from rest lengths.
  static FieldDescriptor make(Architecture arch, const KinematicTree& tree,
                              std::span<const double> rest_zeta);

  std::size_t parts() const { return part_order.size(); }
  bool has_latent() const { return latent_instances > 0; }
  bool has_selector() const { return arch == Architecture::NarfD || arch == Architecture::DNarf; }
  bool supports_segmentation() const { return arch == Architecture::NarfP || arch == Architecture::NarfD; }

  // Input widths of one density / color branch.
  std::size_t density_input_dim() const;
  std::size_t color_input_dim() const;

  // Throws Error describing the first inconsistent field.
  void validate() const;

  nlohmann::json to_json() const;
  static FieldDescriptor from_json(const nlohmann::json& j);
};

// One affine layer evaluated once per sample.
struct LayerShape {
  std::string name;
  std::size_t in = 0;
  std::size_t out = 0;
};

// Every affine layer of the architecture in parameter-creation order.
std::vector<LayerShape> layer_plan(const FieldDescriptor& desc);

// Pose-dependent, per-part quantities shared by all samples of one record.
struct PartFrames {
  std::vector<RigidTransform> transforms;  // part order
  std::vector<Twist> twists;
  std::vector<double> zeta;
  std::vector<std::vector<double>> encoded_twists;
  std::vector<double> encoded_zeta;

  static PartFrames compute(const KinematicTree& tree, const PoseConfig& pose,
                            std::span<const std::size_t> part_order, const EncodingConfig& enc);
};

// Per-sample field inputs. All per-part tensors are in part order.
struct FieldInputs {
  Tensor x, d;                         // [S x 3] world space
  std::vector<Tensor> local_x;         // [S x 3]
  std::vector<Tensor> local_d;         // [S x 3]
  std::vector<Tensor> twist;           // [S x 6]
  std::vector<Tensor> encoded_twist;   // [S x 12 L_other]
  Tensor zeta;                         // [S x P]
  Tensor encoded_zeta;                 // [S x 2 L_other P]
  // Latent rows per sample; empty when latents are not used.
  std::vector<std::size_t> shape_instance;
  std::vector<std::size_t> appearance_instance;

  static FieldInputs allocate(std::size_t samples, std::size_t parts, const EncodingConfig& enc,
                              bool latent);
  std::size_t size() const { return x.rows(); }
  std::size_t parts() const { return local_x.size(); }
  // Writes sample `row`. Instances are ignored unless allocated with latents.
  void set(std::size_t row, const Vec3& point, const Vec3& dir, const PartFrames& frames,
           std::size_t shape_instance = 0, std::size_t appearance_instance = 0);
};

struct FieldOutput {
  ad::Var sigma;   // [S x 1]
  ad::Var color;   // [S x 3]
  ad::Var hidden;  // [S x W]; not set for NARF_P
  ad::Var part_sigma;                // NARF_P [S x P]
  std::vector<ad::Var> part_colors;  // NARF_P, each [S x 3]
  ad::Var selector_logits;           // NARF_D, DNARF [S x P]
  ad::Var selector_probs;            // NARF_D, DNARF [S x P]
  ad::Var canonical_x;               // DNARF [S x 3]

  // Scores whose per-sample argmax assigns a part (segmentation); unset when
  // the architecture has no part-wise decomposition.
  ad::Var part_scores() const;
};

struct EvalOptions {
  // Replaces selector probabilities [S x P]; used to test hard assignments.
  const Tensor* forced_selector = nullptr;
  // Training-time regularizer: N(0, density_noise^2) is added to the scaled
  // raw density before the ReLU, drawn from *noise_rng once per sample (all
  // parts share it). Keeps gradients flowing where the raw output starts
  // (or drifts) below zero.
  double density_noise = 0.0;
  Rng* noise_rng = nullptr;
};

struct LatentCode {
  std::size_t instance = 0;
  std::vector<double> shape;
  std::vector<double> appearance;
};

// Softmax(sigma / tau) blend of per-part densities and colors.
struct PartBlend {
  ad::Var sigma;
  ad::Var color;
  ad::Var weights;
};
PartBlend blend_parts(ad::Var part_sigma, std::span<const ad::Var> part_colors, double temperature);

ad::Var apply_selector_activation(ad::Var logits, SelectorActivation act);

class FieldModel {
 public:
  FieldModel(FieldDescriptor desc, std::uint64_t seed);
  // Adopts existing parameters (checkpoint load); names and shapes must
  // match the descriptor's plan.
  FieldModel(FieldDescriptor desc, ad::ParameterSet params);

  const FieldDescriptor& descriptor() const { return desc_; }
  ad::ParameterSet& parameters() const { return params_; }

  // Dispatches on the architecture tag.
  FieldOutput evaluate(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt = {}) const;

  FieldOutput eval_pnerf(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt = {}) const;
  FieldOutput eval_rtnerf(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt = {}) const;
  FieldOutput eval_narf_p(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt = {}) const;
  FieldOutput eval_narf_h(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt = {}) const;
  FieldOutput eval_narf_d(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt = {}) const;
  FieldOutput eval_dnarf(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt = {}) const;

  // Raw selector outputs and probabilities, each [S x P].
  std::pair<ad::Var, ad::Var> selector_probs(ad::Tape& tape, const FieldInputs& in) const;

  LatentCode latent_lookup(std::size_t instance) const;

 private:
  struct Branches {
    ad::Var sigma, color, hidden;
  };

  void require(Architecture arch, const char* op) const;
  void check_inputs(const FieldInputs& in) const;
  ad::Var layer(ad::Tape& tape, const std::string& name, ad::Var x) const;
  Branches backbone(ad::Tape& tape, const std::string& prefix, ad::Var density_in,
                    const std::vector<ad::Var>& color_extra, const Tensor& density_noise) const;
  // Appends z_s (density) or z_a (color) rows to a concatenation list.
  void append_latent(ad::Tape& tape, const FieldInputs& in, bool appearance,
                     std::vector<ad::Var>& parts) const;
  ad::Var encoded_local_x(ad::Tape& tape, const FieldInputs& in, std::size_t part) const;
  ad::Var probabilities(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt,
                        FieldOutput& out) const;

  FieldDescriptor desc_;
  // Parameters are bound mutably to tapes so gradients can accumulate;
  // evaluation never modifies their values.
  mutable ad::ParameterSet params_;
};

}  // namespace narf
