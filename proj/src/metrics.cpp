#include "narf/metrics.hpp"

#include "narf/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace narf {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": " + a.shape_string() + " vs " + b.shape_string());
  if (a.empty()) throw ShapeError(std::string(op) + ": empty image");
}

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

std::vector<double> gaussian_window() {
  std::vector<double> w(kWindow);
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    w[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Separable "valid" filtering of a [H x W] plane.
std::vector<double> filter_valid(const std::vector<double>& plane, int width, int height,
                                 const std::vector<double>& w) {
  const int ow = width - kWindow + 1;
  const int oh = height - kWindow + 1;
  std::vector<double> horiz(static_cast<std::size_t>(height) * ow);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += w[k] * plane[static_cast<std::size_t>(y) * width + x + k];
      horiz[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += w[k] * horiz[static_cast<std::size_t>(y + k) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

double mse(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse(a, b);
  if (m <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(m));
}

double ssim(const Tensor& a, const Tensor& b, int width, int height) {
  require_same(a, b, "ssim");
  if (width < kWindow || height < kWindow) throw ShapeError("ssim: image smaller than the 11x11 window");
  if (a.rows() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw ShapeError("ssim: " + a.shape_string() + " does not hold a " + std::to_string(width) + "x" +
                     std::to_string(height) + " image");
  }
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const auto w = gaussian_window();
  const std::size_t n = a.rows();
  double total = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    std::vector<double> pa(n), pb(n), aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
      pa[i] = a(i, c);
      pb[i] = b(i, c);
      aa[i] = pa[i] * pa[i];
      bb[i] = pb[i] * pb[i];
      ab[i] = pa[i] * pb[i];
    }
    const auto ma = filter_valid(pa, width, height, w);
    const auto mb = filter_valid(pb, width, height, w);
    const auto saa = filter_valid(aa, width, height, w);
    const auto sbb = filter_valid(bb, width, height, w);
    const auto sab = filter_valid(ab, width, height, w);
    double acc = 0.0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      const double va = saa[i] - ma[i] * ma[i];
      const double vb = sbb[i] - mb[i] * mb[i];
      const double cov = sab[i] - ma[i] * mb[i];
      acc += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) /
             ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(ma.size());
  }
  return total / static_cast<double>(a.cols());
}

double mask_l2(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mask_l2");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = 255.0 * (a[i] - b[i]);
    s += d * d;
  }
  return s;
}

// ---- reports -----------------------------------------------------------------------

const SplitScore& EvalReport::split(const std::string& name) const {
  for (const SplitScore& s : splits) {
    if (s.split == name) return s;
  }
  throw Error("EvalReport: split '" + name + "' was not evaluated");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema"] = kReportSchema;
  j["config_hash"] = config_hash;
  j["splits"] = nlohmann::json::array();
  for (const SplitScore& s : splits) {
    j["splits"].push_back(
        {{"split", s.split}, {"images", s.images}, {"psnr", s.psnr}, {"ssim", s.ssim}, {"mask_l2", s.mask_l2}});
  }
  j["images"] = nlohmann::json::array();
  for (const ImageScore& s : images) {
    j["images"].push_back(
        {{"split", s.split}, {"index", s.index}, {"psnr", s.psnr}, {"ssim", s.ssim}, {"mask_l2", s.mask_l2}});
  }
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "# " << kReportSchema << " config_hash=" << config_hash << '\n';
  os << "split,index,images,psnr,ssim,mask_l2\n";
  for (const SplitScore& s : splits) {
    os << s.split << ",mean," << s.images << ',' << fmt(s.psnr) << ',' << fmt(s.ssim) << ',' << fmt(s.mask_l2) << '\n';
  }
  for (const ImageScore& s : images) {
    os << s.split << ',' << s.index << ",1," << fmt(s.psnr) << ',' << fmt(s.ssim) << ',' << fmt(s.mask_l2) << '\n';
  }
  return os.str();
}

EvalReport evaluate(const FieldModel& model, const Dataset& data, const std::vector<std::string>& splits,
                    const EvaluateConfig& cfg, std::uint64_t config_hash) {
  const FieldDescriptor& desc = model.descriptor();
  if (desc.parts() != data.scene.parts()) {
    throw Error("evaluate: model has " + std::to_string(desc.parts()) + " parts, scene has " +
                std::to_string(data.scene.parts()));
  }
  if (desc.has_latent() && desc.latent_instances != data.scene.instances.size()) {
    throw Error("evaluate: latent table size does not match the scene's instance count");
  }
  for (const std::string& name : splits) {
    if (!data.has_split(name)) throw Error("evaluate: split '" + name + "' is missing");
  }
  EvalReport report;
  report.config_hash = config_hash;
  for (const std::string& name : splits) {
    const auto& records = data.split(name);
    std::size_t count = records.size();
    if (cfg.max_images_per_split > 0) count = std::min(count, cfg.max_images_per_split);
    SplitScore total;
    total.split = name;
    total.images = count;
    for (std::size_t i = 0; i < count; ++i) {
      const DatasetRecord& r = records[i];
      if (r.rgb.rows() != static_cast<std::size_t>(r.camera.width) * static_cast<std::size_t>(r.camera.height)) {
        throw Error("evaluate: image resolution does not match its camera in split '" + name + "'");
      }
      const RenderedImage img = render_image(model, r.camera, r.pose, cfg.render, r.instance, r.instance);
      ImageScore s;
      s.split = name;
      s.index = r.index;
      s.psnr = psnr(img.rgb, r.rgb);
      s.ssim = ssim(img.rgb, r.rgb, img.width, img.height);
      s.mask_l2 = mask_l2(img.mask, r.mask);
      total.psnr += s.psnr;
      total.ssim += s.ssim;
      total.mask_l2 += s.mask_l2;
      report.images.push_back(s);
    }
    if (count > 0) {
      total.psnr /= static_cast<double>(count);
      total.ssim /= static_cast<double>(count);
      total.mask_l2 /= static_cast<double>(count);
    }
    report.splits.push_back(total);
  }
  return report;
}

EvalReport evaluate(const Checkpoint& ckpt, const Dataset& data, const std::vector<std::string>& splits,
                    const EvaluateConfig& cfg) {
  if (!ckpt.model) throw Error("evaluate: checkpoint holds no model");
  return evaluate(*ckpt.model, data, splits, cfg, ckpt.config_hash);
}

// ---- cost ----------------------------------------------------------------------------

nlohmann::json CostReport::to_json() const {
  return {{"schema", kCostSchema},
          {"arch", arch},
          {"samples", samples},
          {"parameters", parameters},
          {"macs_per_sample", macs_per_sample},
          {"macs_per_ray", macs_per_ray},
          {"flops_per_ray", flops_per_ray},
          {"memory_per_ray", memory_per_ray}};
}

std::string CostReport::csv_header() {
  return "arch,samples,parameters,macs_per_sample,macs_per_ray,flops_per_ray,memory_per_ray";
}

std::string CostReport::csv_row() const {
  std::ostringstream os;
  os << arch << ',' << samples << ',' << parameters << ',' << macs_per_sample << ',' << macs_per_ray << ','
     << flops_per_ray << ',' << memory_per_ray;
  return os.str();
}

CostReport cost_report(const FieldDescriptor& desc, std::size_t samples) {
  desc.validate();
  if (samples == 0) throw Error("cost_report: sample count must be >= 1");
  CostReport r;
  r.arch = to_string(desc.arch);
  r.samples = samples;
  std::uint64_t activations = 0;
  for (const LayerShape& l : layer_plan(desc)) {
    r.parameters += static_cast<std::uint64_t>(l.in) * l.out + l.out;
    r.macs_per_sample += static_cast<std::uint64_t>(l.in) * l.out;
    activations += l.in + l.out;
  }
  if (desc.has_latent()) {
    r.parameters += static_cast<std::uint64_t>(desc.latent_instances) *
                    (desc.latent_shape_dim + desc.latent_appearance_dim);
  }
  if (desc.arch == Architecture::NarfP) {
    // Softmax weights from P densities, then the weighted density and color.
    const std::uint64_t p = desc.parts();
    r.macs_per_sample += 4 * p;
    activations += 2 * p;
  }
  r.macs_per_ray = r.macs_per_sample * samples;
  r.flops_per_ray = 2 * r.macs_per_ray;
  r.memory_per_ray = activations * samples;
  return r;
}

FieldDescriptor paper_scale_descriptor(Architecture arch) {
  const std::vector<int> parents{-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};
  const std::size_t bones = parents.size() - 1;
  std::vector<Vec3> axes(bones, Vec3::UnitY());
  const KinematicTree tree(parents, axes);
  const std::vector<double> zeta(bones, 0.1);
  FieldDescriptor d = FieldDescriptor::make(arch, tree, zeta);
  d.depth = 8;
  d.width = 256;
  d.color_width = 128;
  d.skip_layer = 4;
  d.validate();
  return d;
}

}  // namespace narf
