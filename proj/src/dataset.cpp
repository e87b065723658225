#include "narf/dataset.hpp"

#include "narf/error.hpp"
#include "narf/image_io.hpp"
#include "narf/parallel.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace narf {

namespace {

// Stream ids for derive_seed; each random decision has its own stream.
constexpr std::uint64_t kTrainPoseStream = 0x1000000;
constexpr std::uint64_t kNovelPoseStream = 0x2000000;
constexpr std::uint64_t kRecordStream = 0x3000000;

std::string file_name(const char* stem, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu.png", stem, index);
  return buf;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json counts_json(const DatasetCounts& c) {
  return {{"train_poses", c.train_poses},
          {"views_per_pose", c.views_per_pose},
          {"test_per_split", c.test_per_split},
          {"reference_bins", c.reference_bins}};
}

}  // namespace

const std::vector<std::string>& test_split_names() {
  static const std::vector<std::string> names{"same_pose_same_view", "novel_pose_same_view",
                                              "same_pose_novel_view", "novel_pose_novel_view"};
  return names;
}

bool is_novel_pose_split(const std::string& split) { return split.rfind("novel_pose", 0) == 0; }
bool is_novel_view_split(const std::string& split) {
  return split.size() >= 10 && split.compare(split.size() - 10, 10, "novel_view") == 0;
}

void DatasetCounts::validate() const {
  if (train_poses < 1 || views_per_pose < 1 || test_per_split < 1) {
    throw Error("DatasetCounts: every split needs at least one record");
  }
  if (reference_bins < 1) throw Error("DatasetCounts: reference_bins must be >= 1");
}

const std::vector<DatasetRecord>& Dataset::split(const std::string& name) const {
  const auto it = splits.find(name);
  if (it == splits.end()) throw Error("dataset has no split '" + name + "'");
  return it->second;
}

nlohmann::json pose_to_json(const PoseConfig& pose) {
  const Mat3& r = pose.root.rotation;
  nlohmann::json theta = nlohmann::json::array();
  for (const Vec3& t : pose.theta) theta.push_back({t.x(), t.y(), t.z()});
  return {{"root",
           {{"rotation", {{r(0, 0), r(0, 1), r(0, 2)}, {r(1, 0), r(1, 1), r(1, 2)}, {r(2, 0), r(2, 1), r(2, 2)}}},
            {"translation", {pose.root.translation.x(), pose.root.translation.y(), pose.root.translation.z()}}}},
          {"theta", theta},
          {"zeta", pose.zeta}};
}

PoseConfig pose_from_json(const nlohmann::json& j) {
  try {
    PoseConfig p;
    const auto& root = j.at("root");
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) p.root.rotation(r, c) = root.at("rotation").at(r).at(c);
      p.root.translation[r] = root.at("translation").at(r);
    }
    for (const auto& t : j.at("theta")) p.theta.emplace_back(t.at(0), t.at(1), t.at(2));
    p.zeta = j.at("zeta").get<std::vector<double>>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed pose: ") + e.what());
  }
}

Dataset generate_dataset(const SceneSpec& scene, const DatasetCounts& counts, std::uint64_t seed) {
  scene.validate();
  counts.validate();
  Dataset data;
  data.scene = scene;
  data.counts = counts;
  data.seed = seed;
  const std::size_t instances = scene.instances.size();

  // Training poses cycle through the instances.
  std::vector<PoseConfig> train_poses;
  for (std::size_t k = 0; k < counts.train_poses; ++k) {
    Rng rng(derive_seed(seed, kTrainPoseStream + k));
    train_poses.push_back(sample_pose(scene, k % instances, rng));
  }

  // Camera and pose choices are made serially; rendering is parallel.
  std::vector<DatasetRecord*> all;
  std::size_t serial = 0;
  auto add = [&](const std::string& split, std::size_t index, std::size_t instance, std::size_t pose_id,
                 const PoseConfig& pose, const Range& elevation) {
    Rng rng(derive_seed(seed, kRecordStream + serial++));
    DatasetRecord r;
    r.split = split;
    r.index = index;
    r.instance = instance;
    r.pose_id = pose_id;
    r.pose = pose;
    r.camera = sample_camera(scene, elevation, rng);
    data.splits[split].push_back(std::move(r));
  };

  for (std::size_t k = 0; k < counts.train_poses; ++k) {
    for (std::size_t v = 0; v < counts.views_per_pose; ++v) {
      add(kTrainSplit, k * counts.views_per_pose + v, k % instances, k, train_poses[k], scene.train_elevation);
    }
  }
  std::size_t novel_id = counts.train_poses;
  for (const std::string& split : test_split_names()) {
    const Range& elevation = is_novel_view_split(split) ? scene.novel_elevation : scene.train_elevation;
    for (std::size_t i = 0; i < counts.test_per_split; ++i) {
      if (is_novel_pose_split(split)) {
        const std::size_t id = novel_id++;
        const std::size_t instance = i % instances;
        Rng rng(derive_seed(seed, kNovelPoseStream + id));
        add(split, i, instance, id, sample_pose(scene, instance, rng), elevation);
      } else {
        Rng rng(derive_seed(seed, kRecordStream + 0x800000 + serial));
        const std::size_t k = uniform_index(rng, counts.train_poses);
        add(split, i, k % instances, k, train_poses[k], elevation);
      }
    }
  }
  for (auto& [name, records] : data.splits) {
    for (auto& r : records) all.push_back(&r);
  }
  parallel_for(all.size(), [&](std::size_t i) {
    DatasetRecord& r = *all[i];
    const ReferenceImage img = render_reference(scene, r.instance, r.pose, r.camera, counts.reference_bins);
    r.rgb = quantize(img.rgb);
    r.mask = quantize(img.mask);
  });
  return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_json(dir / "scene.json", {{"schema", kDatasetSchema},
                                  {"seed", data.seed},
                                  {"counts", counts_json(data.counts)},
                                  {"splits", [&] {
                                     std::vector<std::string> names;
                                     for (const auto& [n, _] : data.splits) names.push_back(n);
                                     return names;
                                   }()},
                                  {"scene", data.scene.to_json()}});
  for (const auto& [name, records] : data.splits) {
    const fs::path sub = dir / name;
    fs::create_directories(sub);
    nlohmann::json recs = nlohmann::json::array();
    for (const DatasetRecord& r : records) {
      const std::string rgb = file_name("rgb", r.index);
      const std::string mask = file_name("mask", r.index);
      write_png(sub / rgb, image_from_tensor(r.rgb, r.camera.width, r.camera.height));
      write_png(sub / mask, image_from_tensor(r.mask, r.camera.width, r.camera.height));
      recs.push_back({{"index", r.index},
                      {"image", rgb},
                      {"mask", mask},
                      {"instance", r.instance},
                      {"pose_id", r.pose_id},
                      {"camera", r.camera.to_json()},
                      {"pose", pose_to_json(r.pose)}});
    }
    write_json(sub / "meta.json", {{"schema", kDatasetSchema},
                                   {"split", name},
                                   {"width", data.scene.width},
                                   {"height", data.scene.height},
                                   {"tree", data.scene.to_json().at("tree")},
                                   {"records", recs}});
  }
}

Dataset load_dataset(const std::filesystem::path& dir, const std::vector<std::string>& splits) {
  const nlohmann::json top = read_json(dir / "scene.json");
  if (top.value("schema", "") != kDatasetSchema) {
    throw Error("dataset " + dir.string() + " has schema '" + top.value("schema", "") + "', expected " +
                kDatasetSchema);
  }
  Dataset data;
  try {
    data.seed = top.at("seed");
    const auto& c = top.at("counts");
    data.counts.train_poses = c.at("train_poses");
    data.counts.views_per_pose = c.at("views_per_pose");
    data.counts.test_per_split = c.at("test_per_split");
    data.counts.reference_bins = c.at("reference_bins");
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed scene.json: ") + e.what());
  }
  data.scene = SceneSpec::from_json(top.at("scene"));
  std::vector<std::string> names = splits;
  if (names.empty()) names = top.at("splits").get<std::vector<std::string>>();
  for (const std::string& name : names) {
    const std::filesystem::path sub = dir / name;
    if (!std::filesystem::exists(sub / "meta.json")) throw Error("dataset has no split '" + name + "'");
    const nlohmann::json meta = read_json(sub / "meta.json");
    std::vector<DatasetRecord>& out = data.splits[name];
    try {
      for (const auto& j : meta.at("records")) {
        DatasetRecord r;
        r.split = name;
        r.index = j.at("index");
        r.instance = j.at("instance");
        r.pose_id = j.at("pose_id");
        r.camera = Camera::from_json(j.at("camera"));
        r.pose = pose_from_json(j.at("pose"));
        r.pose.validate(data.scene.tree);
        r.rgb = tensor_from_image(read_png(sub / j.at("image").get<std::string>()));
        r.mask = tensor_from_image(read_png(sub / j.at("mask").get<std::string>()));
        if (r.rgb.cols() != 3 || r.mask.cols() != 1) throw Error("dataset image has unexpected channels");
        out.push_back(std::move(r));
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed " + (sub / "meta.json").string() + ": " + e.what());
    }
  }
  return data;
}

}  // namespace narf
