#include <unistd.h>

#include "esm/verify.hpp"
#include "test_util.hpp"

using namespace esm;

namespace {

const VerifyReport& clean_report() {
  static const VerifyReport r = run_verify_suite();
  return r;
}

}  // namespace

TEST(Verify, SuiteIsGreen) {
  const auto& r = clean_report();
  for (const auto& row : r.rows) EXPECT_TRUE(row.passed) << row.module << "." << row.property << " measured " << row.measured;
  EXPECT_TRUE(r.all_passed());
}

TEST(Verify, CoversEveryModule) {
  std::set<std::string> modules;
  for (const auto& row : clean_report().rows) modules.insert(row.module);
  EXPECT_EQ(modules, (std::set<std::string>{"diffcore", "schedule", "denoiser", "lora", "inversion", "splat",
                                            "distill", "harness"}));
}

TEST(Verify, MixSignFaultIsCaughtByName) {
  const auto r = run_verify_suite(parse_fault("mix-sign"));
  EXPECT_FALSE(r.all_passed());
  bool named = false;
  for (const auto& row : r.rows)
    if (!row.passed) named |= row.module == "inversion" && row.property == "mix_unmix_identity_f32_rho0.93";
  EXPECT_TRUE(named);
}

TEST(Verify, UnknownFaultIsConfigError) {
  EXPECT_THROW(parse_fault("flip-everything"), ConfigError);
  EXPECT_EQ(parse_fault("none"), Fault::none);
}

TEST(Verify, CsvHasOneLinePerProperty) {
  const fs::path p = fs::temp_directory_path() / ("esm_verify_" + std::to_string(::getpid()) + ".csv");
  clean_report().write_csv(p);
  const std::string text = read_text_file(p);
  fs::remove(p);
  EXPECT_EQ(text.rfind("module,property,measured,relation,threshold,passed,seconds\r\n", 0), 0u);
  EXPECT_EQ(std::size_t(std::count(text.begin(), text.end(), '\n')), clean_report().rows.size() + 1);
}
