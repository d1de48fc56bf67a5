#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "saane/config.hpp"
#include "saane/dataset.hpp"
#include "saane/eval.hpp"
#include "saane/tensor.hpp"
#include "saane/trainer.hpp"

namespace saane {

inline constexpr std::uint16_t kFeatureFormatVersion = 1;
inline constexpr std::uint16_t kEmbeddingFormatVersion = 1;
inline constexpr std::uint16_t kCheckpointFormatVersion = 1;

// --- little-endian primitives ---------------------------------------------

namespace detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

inline void put_u16(std::string& out, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  put_bytes(out, b, 2);
}

inline void put_u32(std::string& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 4);
}

inline void put_u64(std::string& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 8);
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

// Sequential reader that reports the byte offset of any truncation.
class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == data_.size(); }

  void read(void* out, std::size_t n) {
    if (pos_ + n > data_.size()) {
      throw DataError(path_ + ": truncated at byte offset " + std::to_string(data_.size()) +
                      " (needed " + std::to_string(pos_ + n) + " bytes)");
    }
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }

  std::size_t remaining() const { return data_.size() - pos_; }

  std::uint16_t u16() {
    unsigned char b[2];
    read(b, 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }

  std::uint32_t u32() {
    unsigned char b[4];
    read(b, 4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  std::uint64_t u64() {
    unsigned char b[8];
    read(b, 8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  void expect_magic(const char* magic) {
    char got[4];
    read(got, 4);
    if (std::memcmp(got, magic, 4) != 0) {
      throw DataError(path_ + ": bad magic, expected \"" + std::string(magic, 4) + "\"");
    }
  }

  void expect_version(std::uint16_t expected, const char* what) {
    const std::uint16_t got = u16();
    if (got != expected) {
      throw DataError(path_ + ": unsupported " + std::string(what) + " format version " +
                      std::to_string(got) + ", expected " + std::to_string(expected));
    }
  }

  const std::string& path() const { return path_; }

 private:
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline Reader open_reader(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path + ": cannot open for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return Reader(buf.str(), path);
}

inline std::uint32_t checked_u32(int v, const char* what) {
  if (v < 0) throw DataError(std::string(what) + " must be non-negative");
  return static_cast<std::uint32_t>(v);
}

inline void put_map(std::string& out, const Tensor<float>& map) {
  put_u32(out, checked_u32(map.extent(0), "channel extent"));
  put_u32(out, checked_u32(map.extent(1), "row extent"));
  put_u32(out, checked_u32(map.extent(2), "column extent"));
  for (float v : map.data) put_f32(out, v);
}

inline Tensor<float> read_map(Reader& r) {
  const std::uint64_t c = r.u32(), h = r.u32(), w = r.u32();
  // A corrupt header must not drive the allocation past the file size.
  if (c * h * w * 4 > r.remaining()) {
    throw DataError(r.path() + ": truncated at byte offset " +
                    std::to_string(r.offset() + r.remaining()) + " (map header asks for " +
                    std::to_string(c * h * w * 4) + " more bytes)");
  }
  Tensor<float> map(Shape{static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)});
  for (float& v : map.data) v = r.f32();
  return map;
}

}  // namespace detail

// Writes through a temporary file in the same directory, then renames.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(tmp.string() + ": cannot open for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError(tmp.string() + ": write failed");
  }
  fs::rename(tmp, path);
}

// --- feature files (SAFM) --------------------------------------------------

inline void write_features(const Dataset& records, const std::filesystem::path& path) {
  std::string out;
  out.append("SAFM", 4);
  detail::put_u16(out, kFeatureFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(records.size()));
  std::vector<int> frames;
  for (const FeatureRecord& r : records) frames.push_back(r.frame_id);
  std::sort(frames.begin(), frames.end());
  if (std::adjacent_find(frames.begin(), frames.end()) != frames.end()) {
    throw DataError(path.string() + ": duplicate frame_id in feature records");
  }
  for (const FeatureRecord& r : records) {
    validate_record(r);
    detail::put_u32(out, detail::checked_u32(r.frame_id, "frame_id"));
    detail::put_u32(out, detail::checked_u32(r.class_id, "class_id"));
    detail::put_u32(out, detail::checked_u32(r.condition_id, "condition_id"));
    detail::put_map(out, r.appearance);
    detail::put_map(out, r.semantic);
  }
  atomic_write(path, out);
}

inline Dataset read_features(const std::filesystem::path& path) {
  detail::Reader r = detail::open_reader(path.string());
  r.expect_magic("SAFM");
  r.expect_version(kFeatureFormatVersion, "feature");
  const std::uint32_t count = r.u32();
  Dataset records;
  records.reserve(count);
  std::vector<int> seen_frames;
  for (std::uint32_t i = 0; i < count; ++i) {
    FeatureRecord rec;
    rec.frame_id = static_cast<int>(r.u32());
    rec.class_id = static_cast<int>(r.u32());
    rec.condition_id = static_cast<int>(r.u32());
    rec.appearance = detail::read_map(r);
    rec.semantic = detail::read_map(r);
    validate_record(rec);
    seen_frames.push_back(rec.frame_id);
    records.push_back(std::move(rec));
  }
  std::sort(seen_frames.begin(), seen_frames.end());
  if (std::adjacent_find(seen_frames.begin(), seen_frames.end()) != seen_frames.end()) {
    throw DataError(path.string() + ": duplicate frame_id in feature file");
  }
  return records;
}

// --- embedding files (SAEM) ------------------------------------------------

inline void write_embeddings(const std::vector<Embedding>& embeddings,
                             const std::filesystem::path& path) {
  std::string out;
  out.append("SAEM", 4);
  detail::put_u16(out, kEmbeddingFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(embeddings.size()));
  for (const Embedding& e : embeddings) {
    detail::put_u32(out, detail::checked_u32(e.frame_id, "frame_id"));
    detail::put_u32(out, detail::checked_u32(e.class_id, "class_id"));
    detail::put_u32(out, detail::checked_u32(e.condition_id, "condition_id"));
    detail::put_u32(out, static_cast<std::uint32_t>(e.values.size()));
    detail::put_u32(out, 1);
    detail::put_u32(out, 1);
    for (float v : e.values) detail::put_f32(out, v);
  }
  atomic_write(path, out);
}

inline std::vector<Embedding> read_embeddings(const std::filesystem::path& path) {
  detail::Reader r = detail::open_reader(path.string());
  r.expect_magic("SAEM");
  r.expect_version(kEmbeddingFormatVersion, "embedding");
  const std::uint32_t count = r.u32();
  std::vector<Embedding> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Embedding e;
    e.frame_id = static_cast<int>(r.u32());
    e.class_id = static_cast<int>(r.u32());
    e.condition_id = static_cast<int>(r.u32());
    const std::uint32_t len = r.u32();
    const std::uint32_t h = r.u32();
    const std::uint32_t w = r.u32();
    if (h != 1 || w != 1) {
      throw DataError(path.string() + ": embedding block must be len x 1 x 1");
    }
    if (static_cast<std::uint64_t>(len) * 4 > r.remaining()) {
      throw DataError(path.string() + ": truncated at byte offset " +
                      std::to_string(r.offset() + r.remaining()) + " (embedding asks for " +
                      std::to_string(static_cast<std::uint64_t>(len) * 4) + " more bytes)");
    }
    e.values.resize(len);
    for (float& v : e.values) v = r.f32();
    out.push_back(std::move(e));
  }
  return out;
}

// --- checkpoints (SACK) ------------------------------------------------------

// Manifest (format version, architecture digest, step count) followed by
// named parameter records. Values are stored as 32-bit little-endian reals.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, std::uint64_t digest, std::uint64_t steps,
                     const std::vector<Parameter<T>*>& params) {
  std::string out;
  out.append("SACK", 4);
  detail::put_u16(out, kCheckpointFormatVersion);
  detail::put_u64(out, digest);
  detail::put_u64(out, steps);
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter<T>* p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out.append(p->name);
    detail::put_u32(out, static_cast<std::uint32_t>(p->value.rank()));
    for (int e : p->value.shape) detail::put_u32(out, detail::checked_u32(e, "extent"));
    for (const T& v : p->value.data) detail::put_f32(out, static_cast<float>(v));
  }
  atomic_write(path, out);
}

// Loads parameter values into an existing model's census. The stored
// architecture digest and the exact parameter census (names and shapes, in
// order) must match, otherwise the checkpoint is rejected.
template <typename T>
std::uint64_t load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_digest,
                              const std::vector<Parameter<T>*>& params) {
  detail::Reader r = detail::open_reader(path.string());
  r.expect_magic("SACK");
  r.expect_version(kCheckpointFormatVersion, "checkpoint");
  const std::uint64_t digest = r.u64();
  if (digest != expected_digest) {
    std::ostringstream msg;
    msg << path.string() << ": architecture digest mismatch (checkpoint 0x" << std::hex << digest
        << ", config 0x" << expected_digest << ")";
    throw DataError(msg.str());
  }
  const std::uint64_t steps = r.u64();
  const std::uint32_t count = r.u32();
  if (count != params.size()) {
    throw DataError(path.string() + ": parameter census mismatch: checkpoint has " +
                    std::to_string(count) + " parameters, model has " +
                    std::to_string(params.size()));
  }
  for (Parameter<T>* p : params) {
    const std::uint32_t name_len = r.u32();
    std::string name(name_len, '\0');
    r.read(name.data(), name_len);
    if (name != p->name) {
      throw DataError(path.string() + ": parameter census mismatch: expected '" + p->name +
                      "', found '" + name + "'");
    }
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(r.u32());
    if (shape != p->value.shape) {
      throw DataError(path.string() + ": parameter '" + name + "' has shape " + shape_str(shape) +
                      ", model expects " + shape_str(p->value.shape));
    }
    for (T& v : p->value.data) v = static_cast<T>(r.f32());
  }
  return steps;
}

// --- config JSON -------------------------------------------------------------

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  return nlohmann::json{
      {"common_dim", cfg.common_dim},
      {"appearance_dim", cfg.appearance_dim},
      {"semantic_dim", cfg.semantic_dim},
      {"reduction_ratio", cfg.reduction_ratio},
      {"spp_levels", cfg.spp_levels},
      {"alpha", cfg.alpha},
      {"margin", cfg.margin},
      {"lr", cfg.lr},
      {"weight_decay", cfg.weight_decay},
      {"batch_classes", cfg.batch_classes},
      {"batch_examples", cfg.batch_examples},
      {"epochs", cfg.epochs},
      {"seed", cfg.seed},
      {"share_channel_attention", cfg.share_channel_attention},
      {"use_semantic", cfg.use_semantic},
      {"use_attention", cfg.use_attention},
      {"spp_mode", cfg.spp_mode == PoolMode::Max ? "max" : "avg"},
      {"ratio_direction", cfg.ratio_direction == RatioDirection::AcceptLeq ? "leq" : "geq"},
      {"map_h", cfg.map_h},
      {"map_w", cfg.map_w},
      {"sampling", {{"d_min", cfg.sampling.d_min}, {"w_max", cfg.sampling.w_max}}},
      {"synth",
       {{"gain_strength", cfg.synth.gain_strength},
        {"appearance_noise", cfg.synth.appearance_noise},
        {"semantic_noise", cfg.synth.semantic_noise},
        {"distractor_count", cfg.synth.distractor_count},
        {"distractor_strength", cfg.synth.distractor_strength},
        {"distractor_radius", cfg.synth.distractor_radius}}}};
}

namespace detail {

template <typename T>
void take(nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    out = it->get<T>();
    j.erase(it);
  }
}

inline void reject_unknown(const nlohmann::json& j, const char* where) {
  if (!j.empty()) {
    throw DataError(std::string("unknown key '") + j.begin().key() + "' in " + where + " config");
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(nlohmann::json j) {
  RunConfig cfg;
  detail::take(j, "common_dim", cfg.common_dim);
  detail::take(j, "appearance_dim", cfg.appearance_dim);
  detail::take(j, "semantic_dim", cfg.semantic_dim);
  detail::take(j, "reduction_ratio", cfg.reduction_ratio);
  detail::take(j, "spp_levels", cfg.spp_levels);
  detail::take(j, "alpha", cfg.alpha);
  detail::take(j, "margin", cfg.margin);
  detail::take(j, "lr", cfg.lr);
  detail::take(j, "weight_decay", cfg.weight_decay);
  detail::take(j, "batch_classes", cfg.batch_classes);
  detail::take(j, "batch_examples", cfg.batch_examples);
  detail::take(j, "epochs", cfg.epochs);
  detail::take(j, "seed", cfg.seed);
  detail::take(j, "share_channel_attention", cfg.share_channel_attention);
  detail::take(j, "use_semantic", cfg.use_semantic);
  detail::take(j, "use_attention", cfg.use_attention);
  if (auto it = j.find("spp_mode"); it != j.end()) {
    const std::string mode = it->get<std::string>();
    if (mode == "max") {
      cfg.spp_mode = PoolMode::Max;
    } else if (mode == "avg") {
      cfg.spp_mode = PoolMode::Avg;
    } else {
      throw DataError("spp_mode must be \"max\" or \"avg\", got \"" + mode + "\"");
    }
    j.erase(it);
  }
  if (auto it = j.find("ratio_direction"); it != j.end()) {
    const std::string dir = it->get<std::string>();
    if (dir == "leq") {
      cfg.ratio_direction = RatioDirection::AcceptLeq;
    } else if (dir == "geq") {
      cfg.ratio_direction = RatioDirection::AcceptGeq;
    } else {
      throw DataError("ratio_direction must be \"leq\" or \"geq\", got \"" + dir + "\"");
    }
    j.erase(it);
  }
  detail::take(j, "map_h", cfg.map_h);
  detail::take(j, "map_w", cfg.map_w);
  if (auto it = j.find("sampling"); it != j.end()) {
    nlohmann::json sub = *it;
    detail::take(sub, "d_min", cfg.sampling.d_min);
    detail::take(sub, "w_max", cfg.sampling.w_max);
    detail::reject_unknown(sub, "sampling");
    j.erase(it);
  }
  if (auto it = j.find("synth"); it != j.end()) {
    nlohmann::json sub = *it;
    detail::take(sub, "gain_strength", cfg.synth.gain_strength);
    detail::take(sub, "appearance_noise", cfg.synth.appearance_noise);
    detail::take(sub, "semantic_noise", cfg.synth.semantic_noise);
    detail::take(sub, "distractor_count", cfg.synth.distractor_count);
    detail::take(sub, "distractor_strength", cfg.synth.distractor_strength);
    detail::take(sub, "distractor_radius", cfg.synth.distractor_radius);
    detail::reject_unknown(sub, "synth");
    j.erase(it);
  }
  detail::reject_unknown(j, "run");

  if (cfg.common_dim <= 0 || cfg.appearance_dim <= 0 || cfg.semantic_dim <= 0 ||
      cfg.reduction_ratio <= 0 || cfg.spp_levels.empty() || cfg.alpha <= 0.0 ||
      cfg.batch_classes <= 0 || cfg.batch_examples <= 0 || cfg.epochs < 0 || cfg.map_h <= 0 ||
      cfg.map_w <= 0) {
    throw DataError("config values must be positive where applicable");
  }
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open config");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": invalid JSON: " + e.what());
  }
  return run_config_from_json(std::move(j));
}

// --- CSV reports (UTF-8, LF, fixed column order) -----------------------------

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace detail

// threshold,precision,recall rows with a trailing AUC comment line.
inline void write_pr_csv(const std::filesystem::path& path, const PrCurve& curve) {
  std::string out = "threshold,precision,recall\n";
  for (const PrPoint& p : curve.points) {
    out += detail::fmt_double(p.threshold) + "," + detail::fmt_double(p.precision) + "," +
           detail::fmt_double(p.recall) + "\n";
  }
  out += "# auc=" + detail::fmt_double(curve.auc) + "\n";
  atomic_write(path, out);
}

// frame,best,d1,d2,correct with correct as 0/1.
inline void write_query_csv(const std::filesystem::path& path,
                            const std::vector<RetrievalResult>& results,
                            const std::vector<bool>& correct) {
  std::string out = "frame,best,d1,d2,correct\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const RetrievalResult& r = results[i];
    out += std::to_string(r.query_frame) + "," + std::to_string(r.best_frame) + "," +
           detail::fmt_double(r.d1) + "," + detail::fmt_double(r.d2) + "," +
           (correct[i] ? "1" : "0") + "\n";
  }
  atomic_write(path, out);
}

// epoch,mean_loss,active_triplet_fraction,wall_seconds.
inline void write_epoch_csv(const std::filesystem::path& path,
                            const std::vector<EpochStats>& epochs) {
  std::string out = "epoch,mean_loss,active_triplet_fraction,wall_seconds\n";
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    out += std::to_string(i) + "," + detail::fmt_double(epochs[i].mean_loss) + "," +
           detail::fmt_double(epochs[i].active_fraction) + "," +
           detail::fmt_double(epochs[i].wall_seconds) + "\n";
  }
  atomic_write(path, out);
}

// Everything needed to reproduce a run bit-exactly.
inline void write_manifest(const std::filesystem::path& path, const std::string& command,
                           const RunConfig& cfg,
                           const nlohmann::json& extra = nlohmann::json::object()) {
  std::ostringstream digest;
  digest << "0x" << std::hex << arch_digest(cfg);
  nlohmann::json j{{"command", command},
                   {"seed", cfg.seed},
                   {"arch_digest", digest.str()},
                   {"format_versions",
                    {{"features", kFeatureFormatVersion},
                     {"embeddings", kEmbeddingFormatVersion},
                     {"checkpoint", kCheckpointFormatVersion}}},
                   {"config", run_config_to_json(cfg)}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  atomic_write(path, j.dump(2) + "\n");
}

}  // namespace saane
