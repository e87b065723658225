#include "narf/fields.hpp"

#include "narf/error.hpp"
#include "narf/random.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace narf {

namespace {

using ad::Var;

// Weights start unit-variance and are scaled by 1/sqrt(fan_in). With the
// equalized learning rate the scale is applied at run time instead of being
// baked into the stored weights, so Adam steps act on unit-scale values.
double layer_gain(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

std::string part_prefix(std::size_t i) { return "part" + std::to_string(i) + "."; }

Var sum_vars(const std::vector<Var>& vs) {
  Var acc = vs.front();
  for (std::size_t i = 1; i < vs.size(); ++i) acc = ad::add(acc, vs[i]);
  return acc;
}

void backbone_plan(const FieldDescriptor& d, const std::string& prefix, std::size_t density_in,
                   std::size_t color_in, std::vector<LayerShape>& out) {
  for (std::size_t k = 0; k < d.depth; ++k) {
    std::size_t in = k == 0 ? density_in : d.width;
    if (k > 0 && k == d.skip_layer) in += density_in;
    out.push_back({prefix + "trunk." + std::to_string(k), in, d.width});
  }
  out.push_back({prefix + "sigma", d.width, 1});
  out.push_back({prefix + "feature", d.width, d.width});
  out.push_back({prefix + "color.0", color_in, d.color_width});
  out.push_back({prefix + "color.1", d.color_width, 3});
}

// One draw per sample, shared by every part network evaluated at that sample:
// relu(raw + n) is monotone, so the noise never reorders the parts.
Tensor draw_density_noise(std::size_t rows, const EvalOptions& opt) {
  if (!(opt.density_noise > 0.0)) return {};
  if (opt.noise_rng == nullptr) throw Error("FieldModel: density noise requires an rng");
  Tensor noise(rows, 1);
  for (double& v : noise.values()) v = opt.density_noise * normal01(*opt.noise_rng);
  return noise;
}

}  // namespace

// ---- names -----------------------------------------------------------------

std::string to_string(Architecture arch) {
  switch (arch) {
    case Architecture::PNeRF: return "pnerf";
    case Architecture::RTNeRF: return "rtnerf";
    case Architecture::NarfP: return "narf_p";
    case Architecture::NarfH: return "narf_h";
    case Architecture::NarfD: return "narf_d";
    case Architecture::DNarf: return "dnarf";
  }
  return "unknown";
}

std::string to_string(SelectorActivation act) {
  return act == SelectorActivation::Softmax ? "softmax" : "sigmoid";
}

Architecture parse_architecture(std::string_view name) {
  for (Architecture a : {Architecture::PNeRF, Architecture::RTNeRF, Architecture::NarfP,
                         Architecture::NarfH, Architecture::NarfD, Architecture::DNarf}) {
    if (name == to_string(a)) return a;
  }
  throw Error("unknown architecture '" + std::string(name) +
              "' (expected pnerf, rtnerf, narf_p, narf_h, narf_d or dnarf)");
}

SelectorActivation parse_selector_activation(std::string_view name) {
  if (name == "softmax") return SelectorActivation::Softmax;
  if (name == "sigmoid") return SelectorActivation::Sigmoid;
  throw Error("unknown selector activation '" + std::string(name) + "' (expected softmax or sigmoid)");
}

// ---- descriptor ----------------------------------------------------------------

FieldDescriptor FieldDescriptor::make(Architecture arch, const KinematicTree& tree,
                                      std::span<const double> rest_zeta) {
  FieldDescriptor d;
  d.arch = arch;
  d.tree = tree;
  d.part_order = tree.preorder();
  if (rest_zeta.size() != tree.bone_count()) {
    throw Error("FieldDescriptor: expected " + std::to_string(tree.bone_count()) + " rest lengths");
  }
  // Canonical pose: identity root and joint rotations, rest lengths.
  PoseConfig rest;
  rest.theta.assign(tree.bone_count(), Vec3::Zero());
  rest.zeta.assign(rest_zeta.begin(), rest_zeta.end());
  const auto frames = forward_kinematics(tree, rest);
  for (std::size_t b : d.part_order) d.canonical_origins.push_back(frames[b].translation);
  return d;
}

std::size_t FieldDescriptor::density_input_dim() const {
  const std::size_t p = parts();
  const std::size_t ex = encoded_size(3, encoding.position_levels);
  const std::size_t exi = encoded_size(6, encoding.other_levels);
  const std::size_t ez = encoded_size(p, encoding.other_levels);
  const std::size_t zs = has_latent() ? latent_shape_dim : 0;
  switch (arch) {
    case Architecture::PNeRF: return ex + p * exi + ez + zs;
    case Architecture::RTNeRF: return ex + (rt_global ? exi : 0) + ez + zs;
    case Architecture::NarfP:
    case Architecture::DNarf: return ex + ez + zs;
    case Architecture::NarfH:
    case Architecture::NarfD: return p * ex + ez + zs;
  }
  return 0;
}

std::size_t FieldDescriptor::color_input_dim() const {
  const std::size_t p = parts();
  const std::size_t ed = encoded_size(3, encoding.other_levels);
  const std::size_t exi = encoded_size(6, encoding.other_levels);
  const std::size_t za = has_latent() ? latent_appearance_dim : 0;
  switch (arch) {
    case Architecture::PNeRF: return width + p * exi + ed + za;
    case Architecture::RTNeRF:
    case Architecture::NarfP: return width + ed + (rt_color_twist ? exi : 0) + za;
    case Architecture::NarfH:
    case Architecture::NarfD: return width + p * (ed + exi) + za;
    case Architecture::DNarf: return width + ed + exi + za;
  }
  return 0;
}

void FieldDescriptor::validate() const {
  encoding.validate();
  const std::size_t p = tree.bone_count();
  if (p == 0) throw Error("FieldDescriptor: tree has no bones");
  if (part_order.size() != p) throw Error("FieldDescriptor: part_order must list every bone once");
  std::vector<bool> seen(p, false);
  for (std::size_t b : part_order) {
    if (b >= p || seen[b]) throw Error("FieldDescriptor: part_order must list every bone once");
    seen[b] = true;
  }
  if (depth < 1 || width < 1 || color_width < 1) throw Error("FieldDescriptor: depth/width must be >= 1");
  if (skip_layer >= depth) throw Error("FieldDescriptor: skip_layer must be < depth");
  if (!(density_scale > 0.0)) throw Error("FieldDescriptor: density_scale must be > 0");
  if (arch == Architecture::NarfP && !(temperature > 0.0)) {
    throw Error("FieldDescriptor: temperature must be > 0 for narf_p");
  }
  if (has_selector() && selector_hidden < 1) throw Error("FieldDescriptor: selector_hidden must be >= 1");
  if (arch == Architecture::DNarf && canonical_origins.size() != p) {
    throw Error("FieldDescriptor: dnarf needs one canonical origin per part, got " +
                std::to_string(canonical_origins.size()));
  }
  if (has_latent() && latent_shape_dim + latent_appearance_dim == 0) {
    throw Error("FieldDescriptor: latent table needs a shape or appearance dimension");
  }
  if (!has_latent() && latent_shape_dim + latent_appearance_dim > 0) {
    throw Error("FieldDescriptor: latent dimensions given without instances");
  }
}

nlohmann::json FieldDescriptor::to_json() const {
  nlohmann::json axes = nlohmann::json::array();
  for (const Vec3& a : tree.axes()) axes.push_back({a.x(), a.y(), a.z()});
  nlohmann::json origins = nlohmann::json::array();
  for (const Vec3& o : canonical_origins) origins.push_back({o.x(), o.y(), o.z()});
  return {
      {"arch", to_string(arch)},
      {"tree", {{"parents", tree.parents()}, {"axes", axes}}},
      {"part_order", part_order},
      {"encoding", {{"position_levels", encoding.position_levels}, {"other_levels", encoding.other_levels}}},
      {"depth", depth},
      {"width", width},
      {"color_width", color_width},
      {"skip_layer", skip_layer},
      {"density_scale", density_scale},
      {"equalized_lr", equalized_lr},
      {"temperature", temperature},
      {"selector_activation", to_string(selector_activation)},
      {"selector_hidden", selector_hidden},
      {"rt_color_twist", rt_color_twist},
      {"rt_global", rt_global},
      {"latent",
       {{"instances", latent_instances}, {"shape_dim", latent_shape_dim}, {"appearance_dim", latent_appearance_dim}}},
      {"canonical_origins", origins},
  };
}

FieldDescriptor FieldDescriptor::from_json(const nlohmann::json& j) {
  try {
    FieldDescriptor d;
    d.arch = parse_architecture(j.at("arch").get<std::string>());
    std::vector<Vec3> axes;
    for (const auto& a : j.at("tree").at("axes")) axes.emplace_back(a.at(0), a.at(1), a.at(2));
    d.tree = KinematicTree(j.at("tree").at("parents").get<std::vector<int>>(), std::move(axes));
    d.part_order = j.at("part_order").get<std::vector<std::size_t>>();
    d.encoding.position_levels = j.at("encoding").at("position_levels");
    d.encoding.other_levels = j.at("encoding").at("other_levels");
    d.depth = j.at("depth");
    d.width = j.at("width");
    d.color_width = j.at("color_width");
    d.skip_layer = j.at("skip_layer");
    d.density_scale = j.at("density_scale");
    d.equalized_lr = j.at("equalized_lr");
    d.temperature = j.at("temperature");
    d.selector_activation = parse_selector_activation(j.at("selector_activation").get<std::string>());
    d.selector_hidden = j.at("selector_hidden");
    d.rt_color_twist = j.at("rt_color_twist");
    d.rt_global = j.at("rt_global");
    d.latent_instances = j.at("latent").at("instances");
    d.latent_shape_dim = j.at("latent").at("shape_dim");
    d.latent_appearance_dim = j.at("latent").at("appearance_dim");
    for (const auto& o : j.at("canonical_origins")) d.canonical_origins.emplace_back(o.at(0), o.at(1), o.at(2));
    d.validate();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("FieldDescriptor: malformed descriptor: ") + e.what());
  }
}

std::vector<LayerShape> layer_plan(const FieldDescriptor& d) {
  std::vector<LayerShape> plan;
  const std::size_t p = d.parts();
  if (d.arch == Architecture::NarfP) {
    for (std::size_t i = 0; i < p; ++i) {
      backbone_plan(d, part_prefix(i), d.density_input_dim(), d.color_input_dim(), plan);
    }
  } else {
    backbone_plan(d, "", d.density_input_dim(), d.color_input_dim(), plan);
  }
  if (d.has_selector()) {
    const std::size_t in = encoded_size(3, d.encoding.position_levels) + encoded_size(p, d.encoding.other_levels);
    for (std::size_t i = 0; i < p; ++i) {
      const std::string base = "selector." + std::to_string(i) + ".";
      plan.push_back({base + "0", in, d.selector_hidden});
      plan.push_back({base + "1", d.selector_hidden, 1});
    }
  }
  return plan;
}

// ---- inputs ----------------------------------------------------------------------

PartFrames PartFrames::compute(const KinematicTree& tree, const PoseConfig& pose,
                               std::span<const std::size_t> part_order, const EncodingConfig& enc) {
  const auto global = forward_kinematics(tree, pose);
  PartFrames f;
  for (std::size_t b : part_order) {
    f.transforms.push_back(global.at(b));
    f.twists.push_back(twist_of(global[b]));
    f.zeta.push_back(pose.zeta[b]);
    f.encoded_twists.push_back(positional_encode(std::span<const double>(f.twists.back().data(), 6), enc.other_levels));
  }
  f.encoded_zeta = positional_encode(f.zeta, enc.other_levels);
  return f;
}

FieldInputs FieldInputs::allocate(std::size_t samples, std::size_t parts, const EncodingConfig& enc,
                                  bool latent) {
  FieldInputs in;
  in.x = Tensor(samples, 3);
  in.d = Tensor(samples, 3);
  in.local_x.assign(parts, Tensor(samples, 3));
  in.local_d.assign(parts, Tensor(samples, 3));
  in.twist.assign(parts, Tensor(samples, 6));
  in.encoded_twist.assign(parts, Tensor(samples, encoded_size(6, enc.other_levels)));
  in.zeta = Tensor(samples, parts);
  in.encoded_zeta = Tensor(samples, encoded_size(parts, enc.other_levels));
  if (latent) {
    in.shape_instance.assign(samples, 0);
    in.appearance_instance.assign(samples, 0);
  }
  return in;
}

void FieldInputs::set(std::size_t row, const Vec3& point, const Vec3& dir, const PartFrames& frames,
                      std::size_t shape_inst, std::size_t appearance_inst) {
  const std::size_t p = parts();
  if (frames.transforms.size() != p) throw ShapeError("FieldInputs::set: part count mismatch");
  auto put3 = [row](Tensor& t, const Vec3& v) {
    double* r = t.row_ptr(row);
    r[0] = v.x();
    r[1] = v.y();
    r[2] = v.z();
  };
  put3(x, point);
  put3(d, dir);
  for (std::size_t i = 0; i < p; ++i) {
    put3(local_x[i], world_to_local(point, frames.transforms[i]));
    put3(local_d[i], direction_to_local(dir, frames.transforms[i]));
    std::copy_n(frames.twists[i].data(), 6, twist[i].row_ptr(row));
    std::copy(frames.encoded_twists[i].begin(), frames.encoded_twists[i].end(), encoded_twist[i].row_ptr(row));
    zeta(row, i) = frames.zeta[i];
  }
  std::copy(frames.encoded_zeta.begin(), frames.encoded_zeta.end(), encoded_zeta.row_ptr(row));
  if (!shape_instance.empty()) {
    shape_instance[row] = shape_inst;
    appearance_instance[row] = appearance_inst;
  }
}

ad::Var FieldOutput::part_scores() const {
  if (part_sigma.valid()) return part_sigma;
  return selector_probs;
}

// ---- shared building blocks ----------------------------------------------------------

PartBlend blend_parts(Var part_sigma, std::span<const Var> part_colors, double temperature) {
  if (!(temperature > 0.0)) throw Error("blend_parts: temperature must be > 0");
  if (part_colors.size() != part_sigma.cols()) {
    throw ShapeError("blend_parts: " + std::to_string(part_colors.size()) + " colors for " +
                     part_sigma.value().shape_string() + " densities");
  }
  PartBlend out;
  out.weights = ad::softmax_rows(ad::scale(part_sigma, 1.0 / temperature));
  out.sigma = ad::sum_cols(ad::mul(out.weights, part_sigma));
  std::vector<Var> terms;
  for (std::size_t i = 0; i < part_colors.size(); ++i) {
    terms.push_back(ad::mul_col(part_colors[i], ad::slice_cols(out.weights, i, 1)));
  }
  out.color = sum_vars(terms);
  return out;
}

Var apply_selector_activation(Var logits, SelectorActivation act) {
  return act == SelectorActivation::Softmax ? ad::softmax_rows(logits) : ad::sigmoid(logits);
}

// ---- model ---------------------------------------------------------------------

FieldModel::FieldModel(FieldDescriptor desc, std::uint64_t seed) : desc_(std::move(desc)) {
  desc_.validate();
  Rng rng(seed);
  for (const LayerShape& l : layer_plan(desc_)) {
    Tensor w(l.in, l.out);
    const double s = desc_.equalized_lr ? 1.0 : layer_gain(l.in);
    for (double& v : w.values()) v = s * uniform(rng, -1.0, 1.0);
    params_.add(l.name + ".weight", std::move(w));
    params_.add(l.name + ".bias", Tensor(1, l.out));
  }
  if (desc_.has_latent()) {
    if (desc_.latent_shape_dim > 0) {
      params_.add("latent.shape", Tensor(desc_.latent_instances, desc_.latent_shape_dim));
    }
    if (desc_.latent_appearance_dim > 0) {
      params_.add("latent.appearance", Tensor(desc_.latent_instances, desc_.latent_appearance_dim));
    }
  }
}

FieldModel::FieldModel(FieldDescriptor desc, ad::ParameterSet params)
    : desc_(std::move(desc)), params_(std::move(params)) {
  desc_.validate();
  std::size_t expected = 0;
  auto expect = [&](const std::string& name, std::size_t r, std::size_t c) {
    if (!params_.contains(name)) throw Error("FieldModel: missing parameter '" + name + "'");
    const Tensor& v = params_.get(name).value;
    if (v.rows() != r || v.cols() != c) {
      throw ShapeError("FieldModel: parameter '" + name + "' has shape " + v.shape_string() + ", expected [" +
                       std::to_string(r) + "x" + std::to_string(c) + "]");
    }
    ++expected;
  };
  for (const LayerShape& l : layer_plan(desc_)) {
    expect(l.name + ".weight", l.in, l.out);
    expect(l.name + ".bias", 1, l.out);
  }
  if (desc_.has_latent()) {
    if (desc_.latent_shape_dim > 0) expect("latent.shape", desc_.latent_instances, desc_.latent_shape_dim);
    if (desc_.latent_appearance_dim > 0) {
      expect("latent.appearance", desc_.latent_instances, desc_.latent_appearance_dim);
    }
  }
  if (expected != params_.size()) throw Error("FieldModel: unexpected extra parameters");
}

void FieldModel::require(Architecture arch, const char* op) const {
  if (desc_.arch != arch) {
    throw Error(std::string(op) + ": model architecture is " + to_string(desc_.arch) + ", expected " +
                to_string(arch));
  }
}

void FieldModel::check_inputs(const FieldInputs& in) const {
  if (in.parts() != desc_.parts()) {
    throw ShapeError("FieldModel: inputs carry " + std::to_string(in.parts()) + " parts, model has " +
                     std::to_string(desc_.parts()));
  }
  const bool has_ids = !in.shape_instance.empty();
  if (has_ids && !desc_.has_latent()) throw Error("FieldModel: latent supplied to a model without latent dims");
  if (!has_ids && desc_.has_latent()) throw Error("FieldModel: latent model needs per-sample instance ids");
  if (has_ids) {
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in.shape_instance[i] >= desc_.latent_instances || in.appearance_instance[i] >= desc_.latent_instances) {
        throw Error("FieldModel: unknown latent instance id");
      }
    }
  }
}

Var FieldModel::layer(ad::Tape& tape, const std::string& name, Var x) const {
  ad::Parameter& w = params_.get(name + ".weight");
  ad::Parameter& b = params_.get(name + ".bias");
  const double s = desc_.equalized_lr ? layer_gain(w.value.rows()) : 1.0;
  return ad::affine(x, tape.parameter(w), tape.parameter(b), s);
}

FieldModel::Branches FieldModel::backbone(ad::Tape& tape, const std::string& prefix, Var density_in,
                                          const std::vector<Var>& color_extra, const Tensor& density_noise) const {
  Var h = density_in;
  for (std::size_t k = 0; k < desc_.depth; ++k) {
    if (k > 0 && k == desc_.skip_layer) {
      const Var cat[] = {h, density_in};
      h = ad::concat_cols(cat);
    }
    h = ad::relu(layer(tape, prefix + "trunk." + std::to_string(k), h));
  }
  Branches out;
  Var raw = ad::scale(layer(tape, prefix + "sigma", h), desc_.density_scale);
  if (density_noise.size() > 0) raw = ad::add(raw, tape.constant(density_noise));
  out.sigma = ad::relu(raw);
  out.hidden = layer(tape, prefix + "feature", h);
  std::vector<Var> color_in{out.hidden};
  color_in.insert(color_in.end(), color_extra.begin(), color_extra.end());
  Var c = ad::relu(layer(tape, prefix + "color.0", ad::concat_cols(color_in)));
  out.color = ad::sigmoid(layer(tape, prefix + "color.1", c));
  return out;
}

void FieldModel::append_latent(ad::Tape& tape, const FieldInputs& in, bool appearance,
                               std::vector<Var>& parts) const {
  if (!desc_.has_latent()) return;
  const char* name = appearance ? "latent.appearance" : "latent.shape";
  if (!params_.contains(name)) return;
  const auto& ids = appearance ? in.appearance_instance : in.shape_instance;
  parts.push_back(ad::gather_rows(tape.parameter(params_.get(name)), ids));
}

Var FieldModel::encoded_local_x(ad::Tape& tape, const FieldInputs& in, std::size_t part) const {
  return tape.constant(positional_encode(in.local_x[part], desc_.encoding.position_levels));
}

std::pair<Var, Var> FieldModel::selector_probs(ad::Tape& tape, const FieldInputs& in) const {
  if (!desc_.has_selector()) throw Error("selector_probs: architecture " + to_string(desc_.arch) + " has no selector");
  check_inputs(in);
  const Var gz = tape.constant(in.encoded_zeta);
  std::vector<Var> logits;
  for (std::size_t i = 0; i < desc_.parts(); ++i) {
    const Var cat[] = {encoded_local_x(tape, in, i), gz};
    const std::string base = "selector." + std::to_string(i) + ".";
    Var hdn = ad::relu(layer(tape, base + "0", ad::concat_cols(cat)));
    logits.push_back(layer(tape, base + "1", hdn));
  }
  const Var o = ad::concat_cols(logits);
  return {o, apply_selector_activation(o, desc_.selector_activation)};
}

Var FieldModel::probabilities(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt,
                              FieldOutput& out) const {
  if (opt.forced_selector != nullptr) {
    const Tensor& f = *opt.forced_selector;
    if (f.rows() != in.size() || f.cols() != desc_.parts()) {
      throw ShapeError("forced selector must be [" + std::to_string(in.size()) + "x" +
                       std::to_string(desc_.parts()) + "], got " + f.shape_string());
    }
    out.selector_probs = tape.constant(f);
    return out.selector_probs;
  }
  auto [o, p] = selector_probs(tape, in);
  out.selector_logits = o;
  out.selector_probs = p;
  return p;
}

FieldOutput FieldModel::evaluate(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt) const {
  switch (desc_.arch) {
    case Architecture::PNeRF: return eval_pnerf(tape, in, opt);
    case Architecture::RTNeRF: return eval_rtnerf(tape, in, opt);
    case Architecture::NarfP: return eval_narf_p(tape, in, opt);
    case Architecture::NarfH: return eval_narf_h(tape, in, opt);
    case Architecture::NarfD: return eval_narf_d(tape, in, opt);
    case Architecture::DNarf: return eval_dnarf(tape, in, opt);
  }
  throw Error("FieldModel: unknown architecture");
}

FieldOutput FieldModel::eval_pnerf(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt) const {
  require(Architecture::PNeRF, "eval_pnerf");
  check_inputs(in);
  const Tensor noise = draw_density_noise(in.size(), opt);
  const auto& enc = desc_.encoding;
  std::vector<Var> twists;
  for (std::size_t i = 0; i < desc_.parts(); ++i) twists.push_back(tape.constant(in.encoded_twist[i]));

  std::vector<Var> dens{tape.constant(positional_encode(in.x, enc.position_levels))};
  dens.insert(dens.end(), twists.begin(), twists.end());
  dens.push_back(tape.constant(in.encoded_zeta));
  append_latent(tape, in, false, dens);

  std::vector<Var> col = twists;
  col.push_back(tape.constant(positional_encode(in.d, enc.other_levels)));
  append_latent(tape, in, true, col);

  const Branches b = backbone(tape, "", ad::concat_cols(dens), col, noise);
  FieldOutput out;
  out.sigma = b.sigma;
  out.color = b.color;
  out.hidden = b.hidden;
  return out;
}

FieldOutput FieldModel::eval_rtnerf(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt) const {
  require(Architecture::RTNeRF, "eval_rtnerf");
  check_inputs(in);
  const Tensor noise = draw_density_noise(in.size(), opt);
  const auto& enc = desc_.encoding;
  // The single rigid part is the first in part order.
  std::vector<Var> dens;
  if (desc_.rt_global) {
    dens.push_back(tape.constant(positional_encode(in.x, enc.position_levels)));
    dens.push_back(tape.constant(in.encoded_twist[0]));
  } else {
    dens.push_back(encoded_local_x(tape, in, 0));
  }
  dens.push_back(tape.constant(in.encoded_zeta));
  append_latent(tape, in, false, dens);

  std::vector<Var> col{tape.constant(positional_encode(desc_.rt_global ? in.d : in.local_d[0], enc.other_levels))};
  if (desc_.rt_color_twist) col.push_back(tape.constant(in.encoded_twist[0]));
  append_latent(tape, in, true, col);

  const Branches b = backbone(tape, "", ad::concat_cols(dens), col, noise);
  FieldOutput out;
  out.sigma = b.sigma;
  out.color = b.color;
  out.hidden = b.hidden;
  return out;
}

FieldOutput FieldModel::eval_narf_p(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt) const {
  require(Architecture::NarfP, "eval_narf_p");
  check_inputs(in);
  const Tensor noise = draw_density_noise(in.size(), opt);
  const auto& enc = desc_.encoding;
  const Var gz = tape.constant(in.encoded_zeta);
  std::vector<Var> sigmas;
  FieldOutput out;
  for (std::size_t i = 0; i < desc_.parts(); ++i) {
    std::vector<Var> dens{encoded_local_x(tape, in, i), gz};
    append_latent(tape, in, false, dens);
    std::vector<Var> col{tape.constant(positional_encode(in.local_d[i], enc.other_levels))};
    if (desc_.rt_color_twist) col.push_back(tape.constant(in.encoded_twist[i]));
    append_latent(tape, in, true, col);
    const Branches b = backbone(tape, part_prefix(i), ad::concat_cols(dens), col, noise);
    sigmas.push_back(b.sigma);
    out.part_colors.push_back(b.color);
  }
  out.part_sigma = ad::concat_cols(sigmas);
  const PartBlend blend = blend_parts(out.part_sigma, out.part_colors, desc_.temperature);
  out.sigma = blend.sigma;
  out.color = blend.color;
  return out;
}

FieldOutput FieldModel::eval_narf_h(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt) const {
  require(Architecture::NarfH, "eval_narf_h");
  check_inputs(in);
  const Tensor noise = draw_density_noise(in.size(), opt);
  const auto& enc = desc_.encoding;
  std::vector<Var> dens;
  std::vector<Var> col;
  for (std::size_t i = 0; i < desc_.parts(); ++i) {
    dens.push_back(encoded_local_x(tape, in, i));
    col.push_back(tape.constant(positional_encode(in.local_d[i], enc.other_levels)));
    col.push_back(tape.constant(in.encoded_twist[i]));
  }
  dens.push_back(tape.constant(in.encoded_zeta));
  append_latent(tape, in, false, dens);
  append_latent(tape, in, true, col);
  const Branches b = backbone(tape, "", ad::concat_cols(dens), col, noise);
  FieldOutput out;
  out.sigma = b.sigma;
  out.color = b.color;
  out.hidden = b.hidden;
  return out;
}

FieldOutput FieldModel::eval_narf_d(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt) const {
  require(Architecture::NarfD, "eval_narf_d");
  check_inputs(in);
  const Tensor noise = draw_density_noise(in.size(), opt);
  const auto& enc = desc_.encoding;
  FieldOutput out;
  const Var p = probabilities(tape, in, opt, out);
  std::vector<Var> dens;
  std::vector<Var> col;
  for (std::size_t i = 0; i < desc_.parts(); ++i) {
    const Var pi = ad::slice_cols(p, i, 1);
    dens.push_back(ad::mul_col(encoded_local_x(tape, in, i), pi));
    col.push_back(ad::mul_col(tape.constant(positional_encode(in.local_d[i], enc.other_levels)), pi));
    col.push_back(ad::mul_col(tape.constant(in.encoded_twist[i]), pi));
  }
  dens.push_back(tape.constant(in.encoded_zeta));
  append_latent(tape, in, false, dens);
  append_latent(tape, in, true, col);
  const Branches b = backbone(tape, "", ad::concat_cols(dens), col, noise);
  out.sigma = b.sigma;
  out.color = b.color;
  out.hidden = b.hidden;
  return out;
}

FieldOutput FieldModel::eval_dnarf(ad::Tape& tape, const FieldInputs& in, const EvalOptions& opt) const {
  require(Architecture::DNarf, "eval_dnarf");
  check_inputs(in);
  const Tensor noise = draw_density_noise(in.size(), opt);
  if (desc_.canonical_origins.size() != desc_.parts()) {
    throw Error("eval_dnarf: canonical origins length must equal the part count");
  }
  const auto& enc = desc_.encoding;
  FieldOutput out;
  const Var p = probabilities(tape, in, opt, out);
  std::vector<Var> xs, ds, xis;
  for (std::size_t i = 0; i < desc_.parts(); ++i) {
    const Var pi = ad::slice_cols(p, i, 1);
    Tensor shifted = in.local_x[i];
    for (std::size_t r = 0; r < shifted.rows(); ++r) {
      for (int c = 0; c < 3; ++c) shifted(r, c) += desc_.canonical_origins[i][c];
    }
    xs.push_back(ad::mul_col(tape.constant(std::move(shifted)), pi));
    ds.push_back(ad::mul_col(tape.constant(in.local_d[i]), pi));
    xis.push_back(ad::mul_col(tape.constant(in.twist[i]), pi));
  }
  out.canonical_x = sum_vars(xs);
  std::vector<Var> dens{positional_encode(out.canonical_x, enc.position_levels), tape.constant(in.encoded_zeta)};
  append_latent(tape, in, false, dens);
  std::vector<Var> col{positional_encode(sum_vars(ds), enc.other_levels),
                       positional_encode(sum_vars(xis), enc.other_levels)};
  append_latent(tape, in, true, col);
  const Branches b = backbone(tape, "", ad::concat_cols(dens), col, noise);
  out.sigma = b.sigma;
  out.color = b.color;
  out.hidden = b.hidden;
  return out;
}

LatentCode FieldModel::latent_lookup(std::size_t instance) const {
  if (!desc_.has_latent()) throw Error("latent_lookup: model has no latent table");
  if (instance >= desc_.latent_instances) {
    throw Error("latent_lookup: unknown instance id " + std::to_string(instance));
  }
  LatentCode code;
  code.instance = instance;
  if (params_.contains("latent.shape")) {
    const Tensor& t = params_.get("latent.shape").value;
    code.shape.assign(t.row_ptr(instance), t.row_ptr(instance) + t.cols());
  }
  if (params_.contains("latent.appearance")) {
    const Tensor& t = params_.get("latent.appearance").value;
    code.appearance.assign(t.row_ptr(instance), t.row_ptr(instance) + t.cols());
  }
  return code;
}

}  // namespace narf
