#include "narf/checkpoint.hpp"

#include "narf/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

namespace narf {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw Error("save_checkpoint: cannot open " + path.string());
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <typename T>
  void pod(T v) {
    bytes(&v, sizeof v);
  }
  void string(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void tensor(const Tensor& t) {
    pod<std::uint64_t>(t.rows());
    pod<std::uint64_t>(t.cols());
    bytes(t.data(), t.size() * sizeof(double));
  }
  void finish() {
    out_.flush();
    if (!out_) throw Error("save_checkpoint: write failed for " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw Error("load_checkpoint: cannot open " + path.string());
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw Error("load_checkpoint: truncated file " + path_.string());
  }
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string string() {
    const auto n = pod<std::uint64_t>();
    if (n > (1u << 30)) throw Error("load_checkpoint: corrupt string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  Tensor tensor() {
    const auto r = pod<std::uint64_t>();
    const auto c = pod<std::uint64_t>();
    if (r * c > (std::uint64_t{1} << 32)) throw Error("load_checkpoint: corrupt tensor shape");
    Tensor t(r, c);
    bytes(t.data(), t.size() * sizeof(double));
    return t;
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (!ckpt.model) throw Error("save_checkpoint: checkpoint has no model");
  const ad::ParameterSet& params = ckpt.model->parameters();
  Writer w(path);
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  const nlohmann::json header = {{"descriptor", ckpt.model->descriptor().to_json()},
                                 {"train_config", ckpt.train_config}};
  w.string(header.dump());
  w.pod<std::uint64_t>(ckpt.iteration);
  w.pod<std::uint64_t>(ckpt.config_hash);

  w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const ad::Parameter& p : params) {
    w.string(p.name);
    w.tensor(p.value);
  }

  const AdamState& a = ckpt.optimizer;
  w.pod<double>(a.config.learning_rate);
  w.pod<double>(a.config.decay);
  w.pod<double>(a.config.beta1);
  w.pod<double>(a.config.beta2);
  w.pod<double>(a.config.epsilon);
  w.pod<double>(a.learning_rate);
  w.pod<std::uint64_t>(a.step);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.first_moment.size()));
  for (std::size_t i = 0; i < a.first_moment.size(); ++i) {
    w.tensor(a.first_moment[i]);
    w.tensor(a.second_moment[i]);
  }
  w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw Error("load_checkpoint: " + path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error("load_checkpoint: unsupported version " + std::to_string(version));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("load_checkpoint: corrupt header: ") + e.what());
  }
  Checkpoint ckpt;
  const FieldDescriptor desc = FieldDescriptor::from_json(header.at("descriptor"));
  ckpt.train_config = header.value("train_config", nlohmann::json());
  ckpt.iteration = r.pod<std::uint64_t>();
  ckpt.config_hash = r.pod<std::uint64_t>();

  ad::ParameterSet params;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.string();
    Tensor value = r.tensor();
    params.add(std::move(name), std::move(value));
  }
  ckpt.model = std::make_shared<FieldModel>(desc, std::move(params));

  AdamState& a = ckpt.optimizer;
  a.config.learning_rate = r.pod<double>();
  a.config.decay = r.pod<double>();
  a.config.beta1 = r.pod<double>();
  a.config.beta2 = r.pod<double>();
  a.config.epsilon = r.pod<double>();
  a.learning_rate = r.pod<double>();
  a.step = r.pod<std::uint64_t>();
  const auto moments = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < moments; ++i) {
    a.first_moment.push_back(r.tensor());
    a.second_moment.push_back(r.tensor());
  }
  return ckpt;
}

}  // namespace narf
