#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "saane/io.hpp"
#include "saane/model.hpp"
#include "saane/synth.hpp"

using namespace saane;
namespace fs = std::filesystem;
using testutil::random_tensor;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("saane_test_" + std::to_string(
                                std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Dataset sample_records(int count, Rng& rng) {
  Dataset out;
  for (int i = 0; i < count; ++i) {
    FeatureRecord r;
    r.frame_id = i;
    r.class_id = i / 2;
    r.condition_id = i % 2;
    r.appearance = random_tensor<float>(Shape{3, 4, 5}, rng);
    r.semantic = random_tensor<float>(Shape{2, 4, 5}, rng);
    out.push_back(std::move(r));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

TEST_CASE("feature files round-trip bitwise", "[io]") {
  TempDir tmp;
  Rng rng(71);
  Dataset records = sample_records(5, rng);
  const fs::path file = tmp.path / "features.safm";
  write_features(records, file);
  Dataset loaded = read_features(file);
  REQUIRE(loaded.size() == records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    REQUIRE(loaded[i].frame_id == records[i].frame_id);
    REQUIRE(loaded[i].class_id == records[i].class_id);
    REQUIRE(loaded[i].condition_id == records[i].condition_id);
    REQUIRE(loaded[i].appearance == records[i].appearance);
    REQUIRE(loaded[i].semantic == records[i].semantic);
  }
}

TEST_CASE("an empty feature file is valid with count 0", "[io]") {
  TempDir tmp;
  const fs::path file = tmp.path / "empty.safm";
  write_features({}, file);
  REQUIRE(read_features(file).empty());
}

TEST_CASE("a truncated feature file reports the byte offset", "[io][error]") {
  TempDir tmp;
  Rng rng(72);
  Dataset records = sample_records(3, rng);
  const fs::path file = tmp.path / "features.safm";
  write_features(records, file);
  std::string bytes = slurp(file);
  const std::string cut = bytes.substr(0, bytes.size() / 2);
  const fs::path broken = tmp.path / "broken.safm";
  atomic_write(broken, cut);
  REQUIRE_THROWS_MATCHES(read_features(broken), DataError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring(
                             "byte offset " + std::to_string(cut.size()))));
}

TEST_CASE("feature files reject bad magic and duplicate frames", "[io][error]") {
  TempDir tmp;
  Rng rng(73);
  const fs::path bad = tmp.path / "bad.safm";
  atomic_write(bad, "NOPE" + std::string(100, '\0'));
  REQUIRE_THROWS_MATCHES(read_features(bad), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("bad magic")));

  Dataset records = sample_records(2, rng);
  records[1].frame_id = records[0].frame_id;
  const fs::path dup = tmp.path / "dup.safm";
  REQUIRE_THROWS_MATCHES(write_features(records, dup), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("duplicate frame_id")));

  // A file corrupted on disk into a duplicate is rejected on read. The
  // second record's frame_id sits right after the first record: 10-byte
  // header, then 12 bytes of ids plus two (12 + C*H*W*4)-byte blocks.
  records[1].frame_id = 1;
  write_features(records, dup);
  std::string bytes = slurp(dup);
  const std::size_t record_size = 12 + (12 + 3 * 4 * 5 * 4) + (12 + 2 * 4 * 5 * 4);
  const std::size_t second_frame_offset = 10 + record_size;
  REQUIRE(static_cast<unsigned char>(bytes[second_frame_offset]) == 1);
  bytes[second_frame_offset] = 0;
  const fs::path corrupted = tmp.path / "corrupted.safm";
  atomic_write(corrupted, bytes);
  REQUIRE_THROWS_MATCHES(read_features(corrupted), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("duplicate frame_id")));
}

TEST_CASE("a corrupt map header cannot demand more than the file holds", "[io][error]") {
  TempDir tmp;
  Rng rng(79);
  Dataset records = sample_records(1, rng);
  const fs::path file = tmp.path / "features.safm";
  write_features(records, file);
  std::string bytes = slurp(file);
  // Blow up the appearance block's channel count (first field after the ids).
  bytes[22] = static_cast<char>(0xff);
  bytes[23] = static_cast<char>(0xff);
  bytes[24] = static_cast<char>(0xff);
  bytes[25] = static_cast<char>(0x7f);
  const fs::path huge = tmp.path / "huge.safm";
  atomic_write(huge, bytes);
  REQUIRE_THROWS_MATCHES(read_features(huge), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("byte offset")));
}

TEST_CASE("embedding files round-trip", "[io]") {
  TempDir tmp;
  Rng rng(74);
  std::vector<Embedding> embeddings;
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  for (int i = 0; i < 4; ++i) {
    Embedding e;
    e.frame_id = i;
    e.class_id = i;
    e.condition_id = 2;
    for (int k = 0; k < 30; ++k) e.values.push_back(dist(rng));
    embeddings.push_back(std::move(e));
  }
  const fs::path file = tmp.path / "emb.saem";
  write_embeddings(embeddings, file);
  auto loaded = read_embeddings(file);
  REQUIRE(loaded.size() == embeddings.size());
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    REQUIRE(loaded[i].frame_id == embeddings[i].frame_id);
    REQUIRE(loaded[i].class_id == embeddings[i].class_id);
    REQUIRE(loaded[i].condition_id == embeddings[i].condition_id);
    REQUIRE(loaded[i].values == embeddings[i].values);
  }
}

TEST_CASE("checkpoints restore parameters and reject mismatches", "[io]") {
  TempDir tmp;
  RunConfig cfg;
  cfg.common_dim = 8;
  cfg.appearance_dim = 12;
  cfg.semantic_dim = 8;
  cfg.reduction_ratio = 4;
  cfg.spp_levels = {2, 1};
  Rng rng(75);
  EmbeddingModel<float> model(cfg, rng);
  const fs::path file = tmp.path / "model.sack";
  save_checkpoint(file, arch_digest(cfg), 123, model.parameters());

  SECTION("round-trip restores values and steps") {
    Rng rng2(999);
    EmbeddingModel<float> other(cfg, rng2);
    REQUIRE(other.parameters()[0]->value.data != model.parameters()[0]->value.data);
    const std::uint64_t steps = load_checkpoint(file, arch_digest(cfg), other.parameters());
    REQUIRE(steps == 123);
    auto a = model.parameters();
    auto b = other.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(b[i]->value.data == a[i]->value.data);
    }
  }

  SECTION("digest mismatch is rejected") {
    RunConfig changed = cfg;
    changed.common_dim = 16;
    changed.reduction_ratio = 8;
    Rng rng3(1);
    EmbeddingModel<float> other(changed, rng3);
    REQUIRE_THROWS_MATCHES(load_checkpoint(file, arch_digest(changed), other.parameters()),
                           DataError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("digest mismatch")));
  }

  SECTION("census mismatch is rejected") {
    RunConfig no_att = cfg;
    no_att.use_attention = false;
    Rng rng4(1);
    EmbeddingModel<float> other(no_att, rng4);
    // Same digest fields could collide only if the arch digest ignored the
    // attention flag; census length differs regardless.
    REQUIRE_THROWS_AS(load_checkpoint(file, arch_digest(cfg), other.parameters()), DataError);
  }
}

TEST_CASE("run config JSON round-trips and rejects unknown keys", "[io]") {
  RunConfig cfg;
  cfg.common_dim = 32;
  cfg.spp_levels = {3, 1};
  cfg.spp_mode = PoolMode::Avg;
  cfg.ratio_direction = RatioDirection::AcceptGeq;
  cfg.share_channel_attention = false;
  cfg.sampling.d_min = 0.25;
  cfg.synth.distractor_count = 7;

  RunConfig back = run_config_from_json(run_config_to_json(cfg));
  REQUIRE(back.common_dim == 32);
  REQUIRE(back.spp_levels == std::vector<int>{3, 1});
  REQUIRE(back.spp_mode == PoolMode::Avg);
  REQUIRE(back.ratio_direction == RatioDirection::AcceptGeq);
  REQUIRE_FALSE(back.share_channel_attention);
  REQUIRE(back.sampling.d_min == 0.25);
  REQUIRE(back.synth.distractor_count == 7);
  REQUIRE(arch_digest(back) == arch_digest(cfg));

  REQUIRE(run_config_from_json(nlohmann::json::object()).common_dim == 256);  // defaults
  REQUIRE_THROWS_MATCHES(run_config_from_json({{"typo_key", 1}}), DataError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("typo_key")));
  REQUIRE_THROWS_AS(run_config_from_json({{"sampling", {{"bogus", 1}}}}), DataError);
  REQUIRE_THROWS_AS(run_config_from_json({{"spp_mode", "median"}}), DataError);
  REQUIRE_THROWS_AS(run_config_from_json({{"common_dim", -4}}), DataError);
}

TEST_CASE("architecture digests separate different architectures", "[io]") {
  RunConfig a;
  RunConfig b;
  REQUIRE(arch_digest(a) == arch_digest(b));
  b.use_attention = false;
  REQUIRE(arch_digest(a) != arch_digest(b));
  RunConfig c;
  c.spp_levels = {4, 3, 2};
  REQUIRE(arch_digest(a) != arch_digest(c));
  RunConfig d;
  d.lr = 1e-3;  // training detail, not architecture
  REQUIRE(arch_digest(a) == arch_digest(d));
}

TEST_CASE("CSV reports carry the documented layout", "[io]") {
  TempDir tmp;
  PrCurve curve;
  curve.points = {{0.5, 1.0, 0.25}, {1.0, 0.75, 0.5}};
  curve.auc = 0.4375;
  const fs::path pr = tmp.path / "pr.csv";
  write_pr_csv(pr, curve);
  const std::string pr_text = slurp(pr);
  REQUIRE(pr_text.starts_with("threshold,precision,recall\n0.5,1,0.25\n1,0.75,0.5\n"));
  REQUIRE(pr_text.find("# auc=0.4375\n") != std::string::npos);

  std::vector<RetrievalResult> results(1);
  results[0].query_frame = 3;
  results[0].best_frame = 5;
  results[0].d1 = 1.5;
  results[0].d2 = 2.0;
  const fs::path queries = tmp.path / "queries.csv";
  write_query_csv(queries, results, {false});
  REQUIRE(slurp(queries) == "frame,best,d1,d2,correct\n3,5,1.5,2,0\n");

  std::vector<EpochStats> epochs(1);
  epochs[0].mean_loss = 0.5;
  epochs[0].active_fraction = 0.75;
  epochs[0].wall_seconds = 1.25;
  const fs::path ep = tmp.path / "epochs.csv";
  write_epoch_csv(ep, epochs);
  REQUIRE(slurp(ep) == "epoch,mean_loss,active_triplet_fraction,wall_seconds\n0,0.5,0.75,1.25\n");
}

TEST_CASE("manifests record seed, digest, and full config", "[io]") {
  TempDir tmp;
  RunConfig cfg;
  cfg.seed = 77;
  const fs::path file = tmp.path / "manifest.json";
  write_manifest(file, "train", cfg, {{"checkpoint", "out.sack"}});
  std::ifstream in(file);
  nlohmann::json j;
  in >> j;
  REQUIRE(j["command"] == "train");
  REQUIRE(j["seed"] == 77);
  REQUIRE(j["checkpoint"] == "out.sack");
  REQUIRE(j["format_versions"]["features"] == 1);
  REQUIRE(run_config_from_json(j["config"]).seed == 77);
}

TEST_CASE("atomic writes leave no temporary behind", "[io]") {
  TempDir tmp;
  const fs::path file = tmp.path / "out.bin";
  atomic_write(file, "payload");
  REQUIRE(slurp(file) == "payload");
  int entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(tmp.path)) ++entries;
  REQUIRE(entries == 1);
}
