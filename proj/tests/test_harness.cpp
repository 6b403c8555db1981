#include <unistd.h>
#include <zlib.h>

#include <cstdlib>

#include "esm/harness.hpp"
#include "test_util.hpp"

using namespace esm;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("esm_test_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct ScopedEnv {
  std::string name;
  std::optional<std::string> old;
  ScopedEnv(const char* n, const std::string& v) : name(n) {
    if (const char* o = std::getenv(n)) old = o;
    ::setenv(n, v.c_str(), 1);
  }
  ~ScopedEnv() {
    if (old)
      ::setenv(name.c_str(), old->c_str(), 1);
    else
      ::unsetenv(name.c_str());
  }
};

std::uint32_t be32(const std::string& s, std::size_t at) {
  return (std::uint32_t(std::uint8_t(s[at])) << 24) | (std::uint32_t(std::uint8_t(s[at + 1])) << 16) |
         (std::uint32_t(std::uint8_t(s[at + 2])) << 8) | std::uint8_t(s[at + 3]);
}

}  // namespace

TEST(Config, DefaultsParseAndValidate) {
  const auto c = parse_run_config(json{{"schema_version", 1}});
  EXPECT_EQ(c.distill.loss, LossKind::esm);
  EXPECT_DOUBLE_EQ(c.distill.rho, 0.93);
  EXPECT_EQ(c.distill.side, c.dataset.side);
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  EXPECT_THROW(parse_run_config(json{{"schema_version", 1}, {"sede", 3}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"schema_version", 1}, {"distill", {{"rh0", 0.5}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"schema_version", 1}, {"model", {{"width", 4}}}}), ConfigError);
}

TEST(Config, SchemaVersionRequiredToMatch) {
  EXPECT_THROW(parse_run_config(json{{"schema_version", 2}}), ConfigError);
}

TEST(Config, WrongTypesAndRangesRejected) {
  EXPECT_THROW(parse_run_config(json{{"schema_version", 1}, {"distill", {{"rho", "high"}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"schema_version", 1}, {"distill", {{"rho", 1.5}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"schema_version", 1}, {"distill", {{"loss", "bogus"}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"schema_version", 1}, {"dataset", {{"kind", "file"}}}}), ConfigError);
  EXPECT_THROW(parse_run_config(json{{"schema_version", 1}, {"sweep", {{"parameter", "delta_S"}, {"values", {1.5}}}}}),
               ConfigError);
}

TEST(Config, JsonRoundTripIsStable) {
  const auto c = parse_run_config(
      json{{"schema_version", 1}, {"seed", 11}, {"distill", {{"loss", "ism"}, {"delta_T", 25}}}});
  const auto again = parse_run_config(to_json(c));
  EXPECT_EQ(to_json(again), to_json(c));
  EXPECT_EQ(again.distill.loss, LossKind::ism);
  EXPECT_EQ(again.distill.delta_T, 25);
  EXPECT_EQ(again.seed, 11u);
}

TEST(Config, MissingFileIsConfigError) {
  EXPECT_THROW(load_run_config("/nonexistent/esm.json"), ConfigError);
}

TEST(OutputRoot, EnvironmentVariableRelocatesRelativePaths) {
  ScopedEnv env(kOutputRootEnv, "/tmp/esm_root");
  EXPECT_EQ(resolve_artifact("denoiser"), fs::path("/tmp/esm_root/denoiser"));
  EXPECT_EQ(resolve_artifact("/abs/denoiser"), fs::path("/abs/denoiser"));
  RunConfig c;
  EXPECT_EQ(output_dir_for(c, "distill"), fs::path("/tmp/esm_root/distill"));
}

TEST(OutputRoot, DefaultsToRuns) {
  ScopedEnv env(kOutputRootEnv, "");
  EXPECT_EQ(output_root(), fs::path("runs"));
}

TEST(Csv, QuotesOnlyWhenNeeded) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
  EXPECT_EQ(csv_field("x\ny"), "\"x\ny\"");
}

TEST(Csv, WriterUsesCrlf) {
  TempDir d("csv");
  {
    CsvWriter w(d.path / "x.csv", {"a", "b"});
    w.row({"1", "two, three"});
  }
  EXPECT_EQ(read_text_file(d.path / "x.csv"), "a,b\r\n1,\"two, three\"\r\n");
}

TEST(Csv, NumbersRoundTripExactly) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17}) EXPECT_EQ(std::stod(format_number(v)), v);
  EXPECT_EQ(format_number(std::nan("")), "nan");
}

TEST(Png, ChunksCarryValidCrcAndPixels) {
  std::vector<std::uint8_t> px(20);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::uint8_t(i * 12);
  const std::string png = encode_png(px, 5, 4, 1);
  ASSERT_EQ(png.rfind("\x89PNG\r\n\x1a\n", 0), 0u);
  std::size_t at = 8;
  std::string idat;
  std::vector<std::string> kinds;
  while (at < png.size()) {
    const std::uint32_t len = be32(png, at);
    const std::string type = png.substr(at + 4, 4);
    kinds.push_back(type);
    const std::uint32_t crc = std::uint32_t(
        crc32(0, reinterpret_cast<const Bytef*>(png.data() + at + 4), uInt(len + 4)));
    EXPECT_EQ(be32(png, at + 8 + len), crc) << type;
    if (type == "IHDR") {
      EXPECT_EQ(be32(png, at + 8), 5u);
      EXPECT_EQ(be32(png, at + 12), 4u);
    }
    if (type == "IDAT") idat += png.substr(at + 8, len);
    at += 12 + len;
  }
  EXPECT_EQ(kinds.front(), "IHDR");
  EXPECT_EQ(kinds.back(), "IEND");
  std::vector<Bytef> raw(4 * 6);
  uLongf n = raw.size();
  ASSERT_EQ(uncompress(raw.data(), &n, reinterpret_cast<const Bytef*>(idat.data()), uLong(idat.size())), Z_OK);
  ASSERT_EQ(n, 24u);
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(raw[r * 6], 0);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(raw[r * 6 + 1 + c], px[r * 5 + c]);
  }
}

TEST(Png, WriteClampsToBytes) {
  EXPECT_EQ(to_byte(-0.5), 0);
  EXPECT_EQ(to_byte(2.0), 255);
  EXPECT_EQ(to_byte(0.5), 128);
}

TEST(ContactSheet, TilesWithSeparators) {
  const std::vector<Tensor<float>> imgs(3, Tensor<float>({2, 2}, 0.25f));
  const auto sheet = contact_sheet(imgs, 2);
  ASSERT_EQ(sheet.shape(), (Shape{5, 5}));
  EXPECT_EQ(sheet[0], 0.25f);
  EXPECT_EQ(sheet[2], 1.0f);      // gap column
  EXPECT_EQ(sheet[3 * 5 + 3], 1.0f);  // empty fourth tile
  EXPECT_EQ(sheet[3 * 5 + 0], 0.25f);
  EXPECT_THROW(contact_sheet(std::vector<Tensor<float>>{}, 2), ContractViolation);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir d("ckpt");
  Rng rng(1);
  Checkpoint c;
  c.kind = "test";
  c.meta = {{"k", 1}, {"name", "x"}};
  c.add("layer/0/w", rng.normal_tensor<float>({3, 5}));
  c.add("neg_zero", Tensor<float>({2}, -0.0f));
  write_checkpoint(d.path / "c", c);
  const auto back = read_checkpoint(d.path / "c");
  EXPECT_EQ(back.kind, "test");
  EXPECT_EQ(back.meta, c.meta);
  ASSERT_EQ(back.tensors.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(back.tensors[k].first, c.tensors[k].first);
    EXPECT_EQ(back.tensors[k].second.shape(), c.tensors[k].second.shape());
    EXPECT_EQ(std::memcmp(back.tensors[k].second.raw(), c.tensors[k].second.raw(), c.tensors[k].second.size() * 4), 0);
  }
  EXPECT_THROW(c.add("neg_zero", Tensor<float>({1})), IoError);
}

TEST(Checkpoint, TruncatedBlobIsIoError) {
  TempDir d("trunc");
  Checkpoint c;
  c.add("w", Tensor<float>({16}, 1.0f));
  write_checkpoint(d.path, c);
  fs::resize_file(d.path / blob_file_name("w"), 10);
  EXPECT_THROW(read_checkpoint(d.path), IoError);
}

TEST(Checkpoint, MissingOrForeignManifestIsIoError) {
  TempDir d("foreign");
  EXPECT_THROW(read_checkpoint(d.path / "nothing"), IoError);
  write_text_file(d.path / "manifest.json", "{\"format\": \"other\", \"version\": 1}");
  EXPECT_THROW(read_checkpoint(d.path), IoError);
  write_text_file(d.path / "manifest.json", "{not json");
  EXPECT_THROW(read_checkpoint(d.path), IoError);
}

TEST(Checkpoint, DenoiserSurvivesSaveAndLoad) {
  TempDir d("den");
  const auto m = esm::testing::small_model<float>(2, 8, 4);
  write_checkpoint(d.path, denoiser_checkpoint(m, esm::testing::default_schedule(), {"disk", "ring", "cross", "square"}));
  const auto loaded = load_denoiser(d.path);
  EXPECT_EQ(loaded.model.params().value_hash(), m.params().value_hash());
  Rng rng(2);
  const auto x = esm::testing::randn<float>(rng, 8);
  EXPECT_EQ(predict_eps(loaded.model, x, 300, Condition::label(3)), predict_eps(m, x, 300, Condition::label(3)));
}

TEST(FileDataset, RoundTripsThroughCheckpoint) {
  TempDir d("ds");
  Rng rng(3);
  const auto ds = make_shape_dataset<float>(8, 2, rng);
  write_checkpoint(d.path, dataset_checkpoint(ds));
  DatasetConfig cfg;
  cfg.kind = "file";
  cfg.path = d.path.string();
  const auto back = make_dataset(cfg, 0);
  EXPECT_EQ(back.labels, ds.labels);
  EXPECT_EQ(back.class_names, ds.class_names);
  ASSERT_EQ(back.images.size(), ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) EXPECT_EQ(back.images[i], ds.images[i]);
  cfg.path = (d.path / "missing").string();
  EXPECT_THROW(make_dataset(cfg, 0), ConfigError);
}

TEST(Harness, MedianAndClassLookup) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_TRUE(std::isnan(median({})));
  const std::vector<std::string> names{"disk", "ring"};
  EXPECT_EQ(resolve_class("ring", names, 2), 1);
  EXPECT_EQ(resolve_class("0", names, 2), 0);
  EXPECT_THROW(resolve_class("2", names, 2), ConfigError);
  EXPECT_THROW(resolve_class("star", names, 2), ConfigError);
  EXPECT_EQ(pad_int(42, 6), "000042");
}
