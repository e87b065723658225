#pragma once

// Pose-annotated image datasets: generation from a SceneSpec, and the
// on-disk layout (scene.json plus one directory per split holding meta.json
// and PNG images; see docs/dataset_format.md).

#include "narf/kinematics.hpp"
#include "narf/renderer.hpp"
#include "narf/scene.hpp"
#include "narf/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace narf {

inline constexpr const char* kDatasetSchema = "narf-dataset/1";
inline constexpr const char* kTrainSplit = "train";

// The four held-out splits, in reporting order.
const std::vector<std::string>& test_split_names();
bool is_novel_pose_split(const std::string& split);
bool is_novel_view_split(const std::string& split);

struct DatasetRecord {
  std::string split;
  std::size_t index = 0;
  std::size_t instance = 0;
  // Identifies the pose; same-pose splits reuse training pose ids.
  std::size_t pose_id = 0;
  Camera camera;
  PoseConfig pose;
  Tensor rgb;   // [H*W x 3], 8-bit quantized values
  Tensor mask;  // [H*W x 1], 8-bit quantized values
};

struct DatasetCounts {
  std::size_t train_poses = 20;
  std::size_t views_per_pose = 5;
  std::size_t test_per_split = 20;
  std::size_t reference_bins = 256;

  void validate() const;
};

struct Dataset {
  SceneSpec scene;
  DatasetCounts counts;
  std::uint64_t seed = 0;
  std::map<std::string, std::vector<DatasetRecord>> splits;

  // Throws Error when the split is absent.
  const std::vector<DatasetRecord>& split(const std::string& name) const;
  bool has_split(const std::string& name) const { return splits.count(name) > 0; }
};

nlohmann::json pose_to_json(const PoseConfig& pose);
PoseConfig pose_from_json(const nlohmann::json& j);

// Deterministic in (scene, counts, seed), independent of the worker count.
Dataset generate_dataset(const SceneSpec& scene, const DatasetCounts& counts, std::uint64_t seed);

void save_dataset(const Dataset& data, const std::filesystem::path& dir);
// Loads scene.json and every split directory present (or only `splits`).
Dataset load_dataset(const std::filesystem::path& dir, const std::vector<std::string>& splits = {});

}  // namespace narf
