#include "doctest.h"

#include "narf/dataset.hpp"
#include "narf/metrics.hpp"

#include "json.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

using namespace narf;
namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path p = fs::temp_directory_path() / "narf_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

struct Run {
  int code = -1;
  std::string out;  // stdout and stderr together
};

Run narf_cli(const std::string& args) {
  const fs::path log = work_dir() / "last_output.txt";
  const std::string cmd = std::string("\"") + NARF_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string path(const std::string& name) { return (work_dir() / name).string(); }

// Small dataset shared by the cases below.
const std::string& dataset() {
  static const std::string dir = [] {
    const std::string d = path("data");
    const Run r = narf_cli("gen-data --out " + d +
                           " --seed 2 --train-poses 6 --views-per-pose 2 --test-per-split 2 --reference-bins 64");
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

const std::string kSmallModel =
    " --depth 2 --width 32 --color-width 16 --batch-images 4 --rays-per-image 64 --samples 24 --val-every 0 "
    "--quiet";

double eval_psnr(const std::string& checkpoint, const std::string& out) {
  const Run r = narf_cli("eval --checkpoint " + checkpoint + " --data " + dataset() +
                         " --samples 24 --splits same_pose_same_view --out " + out);
  REQUIRE(r.code == 0);
  std::ifstream in(fs::path(out) / "report.json");
  const auto j = nlohmann::json::parse(in);
  return j.at("splits").at(0).at("psnr").get<double>();
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  Run r = narf_cli("");
  CHECK(r.code == 2);
  CHECK(r.out.find("Usage") != std::string::npos);
  r = narf_cli("frobnicate");
  CHECK(r.code == 2);
  r = narf_cli("cost --no-such-flag");
  CHECK(r.code == 2);
  CHECK(r.out.find("--no-such-flag") != std::string::npos);
  r = narf_cli("train --out x");
  CHECK(r.code == 2);
}

TEST_CASE("invalid configuration exits with code 3 naming the field") {
  Run r = narf_cli("train --data " + dataset() + " --out " + path("bad") + " --learning-rate -1");
  CHECK(r.code == 3);
  CHECK(r.out.find("learning_rate") != std::string::npos);

  {
    std::ofstream cfg(path("bad.json"));
    cfg << R"({"batch_images": 0})";
  }
  r = narf_cli("train --data " + dataset() + " --out " + path("bad") + " --train-config " + path("bad.json"));
  CHECK(r.code == 3);
  CHECK(r.out.find("batch_images") != std::string::npos);

  {
    std::ofstream cfg(path("bad.toml"));
    cfg << "[train]\nwidht = 3\n";
  }
  r = narf_cli("--config " + path("bad.toml") + " train --data " + dataset() + " --out " + path("bad"));
  CHECK(r.code == 3);
  CHECK(r.out.find("widht") != std::string::npos);

  // One line on stderr-equivalent output, machine-parsable prefix.
  CHECK(r.out.rfind("error: ", 0) == 0);
}

TEST_CASE("gradcheck reports the maximum relative error") {
  const Run r = narf_cli("gradcheck --arch narf_d --seed 1");
  CHECK(r.code == 0);
  CHECK(r.out.find("max_relative_error=") != std::string::npos);
  CHECK(narf_cli("gradcheck --arch nerf").code != 0);
}

TEST_CASE("cost prints one row per architecture") {
  const Run r = narf_cli("cost --preset paper --out " + path("cost"));
  CHECK(r.code == 0);
  for (const char* arch : {"pnerf", "rtnerf", "narf_p", "narf_h", "narf_d", "dnarf"}) {
    CHECK(r.out.find(std::string("\n") + arch + ",") != std::string::npos);
  }
  CHECK(fs::exists(path("cost")));
}

TEST_CASE("train, render and evaluate end to end") {
  const std::string untrained = path("untrained");
  const std::string trained = path("trained");
  REQUIRE(narf_cli("train --data " + dataset() + " --out " + untrained + " --iterations 0" + kSmallModel).code == 0);
  REQUIRE(narf_cli("train --data " + dataset() + " --out " + trained + " --iterations 300" + kSmallModel).code == 0);
  CHECK(fs::exists(fs::path(trained) / "metrics.csv"));
  CHECK(fs::exists(fs::path(trained) / "manifest.json"));

  const double before = eval_psnr(untrained + "/checkpoint.narf", path("eval_untrained"));
  const double after = eval_psnr(trained + "/checkpoint.narf", path("eval_trained"));
  INFO("untrained " << before << " dB, trained " << after << " dB");
  CHECK(before < after);

  const Dataset data = load_dataset(dataset(), {"novel_pose_same_view"});
  const DatasetRecord& rec = data.split("novel_pose_same_view").front();
  {
    std::ofstream pose(path("pose.json"));
    pose << nlohmann::json{{"pose", pose_to_json(rec.pose)}, {"camera", rec.camera.to_json()}}.dump();
  }
  const std::string out = path("render");
  const Run r = narf_cli("render --checkpoint " + trained + "/checkpoint.narf --pose " + path("pose.json") +
                         " --out " + out + " --samples 24 --segmentation");
  CHECK(r.code == 0);
  for (const char* f : {"rgb.png", "depth.png", "mask.png", "seg.png", "render.json", "manifest.json"}) {
    CHECK_MESSAGE(fs::exists(fs::path(out) / f), f);
  }

  const Run sweep = narf_cli("render --checkpoint " + trained + "/checkpoint.narf --data " + dataset() +
                             " --out " + path("sweep") + " --samples 12 --sweep view --frames 3");
  CHECK(sweep.code == 0);
  std::size_t frames = 0;
  for (const auto& e : fs::directory_iterator(path("sweep"))) {
    const std::string name = e.path().filename().string();
    frames += name.rfind("frame_", 0) == 0 && name.find("_rgb.png") != std::string::npos;
  }
  CHECK(frames == 3);

  CHECK(narf_cli("eval --checkpoint " + trained + "/checkpoint.narf --data " + dataset() +
                 " --splits no_such_split")
            .code != 0);
  CHECK(narf_cli("render --checkpoint " + path("missing.narf") + " --out " + path("x")).code != 0);
}
