#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "fhrformer/synthgen.hpp"
#include "test_support.hpp"

using namespace fhrformer;
using namespace fhrformer::synth;

namespace {

SynthConfig quiet_config() {
  auto c = short_config();
  c.variability_components = 0;
  c.n_accels = 0;
  c.n_decels = 0;
  c.noise_std_bpm = 0.0;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(GenerateSignal, QuietConfigIsConstantBaseline) {
  auto c = quiet_config();
  c.seed = 4;
  const auto r = generate_signal(c);
  ASSERT_EQ(r.size(), 720u);
  for (double v : r.fhr_bpm) EXPECT_EQ(v, r.fhr_bpm[0]);
  EXPECT_GE(r.fhr_bpm[0], 110.0);
  EXPECT_LE(r.fhr_bpm[0], 160.0);
  EXPECT_EQ(r.missing_count(), 0u);
}

TEST(GenerateSignal, SameSeedBitIdentical) {
  auto c = short_config();
  c.seed = 77;
  EXPECT_EQ(generate_signal(c).fhr_bpm, generate_signal(c).fhr_bpm);
  auto d = c;
  d.seed = 78;
  EXPECT_NE(generate_signal(c).fhr_bpm, generate_signal(d).fhr_bpm);
}

TEST(GenerateSignal, MeanTracksBaselineWithoutEvents) {
  // Fix the baseline by collapsing its range, then average over seeds.
  SynthConfig c;
  c.n_accels = 0;
  c.n_decels = 0;
  c.baseline_bpm = {135.0, 135.0};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    c.seed = seed;
    const auto r = generate_signal(c);
    double mean = 0.0;
    for (double v : r.fhr_bpm) mean += v;
    mean /= static_cast<double>(r.size());
    EXPECT_NEAR(mean, 135.0, 2.0) << "seed " << seed;
  }
}

TEST(GenerateSignal, StaysInDeviceRange) {
  SynthConfig c;
  c.decel_amp_bpm = {120.0, 150.0};
  c.baseline_bpm = {110.0, 110.0};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    c.seed = seed;
    for (double v : generate_signal(c).fhr_bpm) {
      EXPECT_GE(v, 30.0);
      EXPECT_LE(v, 220.0);
    }
  }
}

TEST(SynthConfig, RejectsInvalidRanges) {
  SynthConfig c;
  c.baseline_bpm = {10.0, 160.0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SynthConfig{};
  c.accel_duration_s = {0.0, 10.0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SynthConfig{};
  c.gap_len_s = {60.0, 30.0};
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(InjectDropouts, ZeroGapsIsIdentity) {
  auto c = short_config();
  const auto r = generate_signal(c);
  const auto out = inject_dropouts(r, c);
  EXPECT_EQ(out.recording.fhr_bpm, r.fhr_bpm);
  EXPECT_TRUE(out.gaps.empty());
}

TEST(InjectDropouts, SixtySecondGapIs120Samples) {
  auto c = short_config();
  c.gap_count = 1;
  c.gap_len_s = {60.0, 60.0};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    c.seed = seed;
    const auto out = inject_dropouts(generate_signal(c), c);
    EXPECT_EQ(out.recording.missing_count(), 120u);
    ASSERT_EQ(out.gaps.size(), 1u);
    EXPECT_EQ(out.gaps[0].length, 120u);
  }
}

TEST(InjectDropouts, GapsDisjointAndRecoverable) {
  SynthConfig c;
  c.gap_count = 12;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    c.seed = seed;
    const auto out = inject_dropouts(generate_signal(c), c);
    std::vector<std::uint8_t> expect(c.length, 1);
    std::size_t requested = 0;
    for (std::size_t g = 0; g < out.gaps.size(); ++g) {
      const auto& gap = out.gaps[g];
      EXPECT_GE(gap.length, 60u);
      EXPECT_LE(gap.length, 120u);
      if (g) { EXPECT_GT(gap.start, out.gaps[g - 1].start + out.gaps[g - 1].length); }
      for (std::size_t i = gap.start; i < gap.start + gap.length; ++i) expect[i] = 0;
      requested += gap.length;
    }
    EXPECT_EQ(out.recording.observed, expect);
    EXPECT_EQ(out.recording.missing_count(), requested);
  }
}

TEST(InjectDropouts, MissingFractionWithinOneGapOfRequest) {
  // Request a fraction f of a 7200 sample signal with 60 s gaps.
  SynthConfig c;
  c.gap_len_s = {60.0, 60.0};
  for (double f : {0.05, 0.2, 0.5}) {
    c.gap_count = static_cast<std::size_t>(std::llround(f * 7200.0 / 120.0));
    c.seed = 3;
    const auto out = inject_dropouts(generate_signal(c), c);
    const double got = static_cast<double>(out.recording.missing_count());
    EXPECT_LE(std::abs(got - f * 7200.0), 120.0);
  }
}

TEST(InjectDropouts, ExcessiveGapMassRejected) {
  auto c = short_config();
  c.gap_count = 6;
  c.gap_len_s = {60.0, 60.0};  // 720 of 720 samples
  EXPECT_THROW(inject_dropouts(generate_signal(c), c), DataError);
}

TEST(InjectArtifacts, ZeroCountIsIdentity) {
  auto c = short_config();
  const auto r = generate_signal(c);
  EXPECT_EQ(inject_doppler_artifacts(r, c).recording.fhr_bpm, r.fhr_bpm);
}

TEST(InjectArtifacts, RatiosAreExactlyTwoOrHalf) {
  auto c = short_config();
  c.artifact_count = 25;
  c.gap_count = 2;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ep = make_episode(c, seed, "ep");
    ASSERT_EQ(ep.artifacts.size(), 25u);
    std::set<std::size_t> seen;
    for (const auto& a : ep.artifacts) {
      EXPECT_TRUE(seen.insert(a.index).second);
      EXPECT_EQ(ep.recording.observed[a.index], 1);
      const double ratio = ep.recording.fhr_bpm[a.index] / ep.clean.fhr_bpm[a.index];
      EXPECT_TRUE(ratio == 2.0 || ratio == 0.5) << ratio;
      EXPECT_EQ(ratio, a.factor);
    }
    for (std::size_t i = 0; i < ep.clean.size(); ++i)
      if (!seen.count(i) && ep.recording.observed[i]) { EXPECT_EQ(ep.recording.fhr_bpm[i], ep.clean.fhr_bpm[i]); }
  }
}

TEST(BuildDataset, SplitSizesAndDisjointIds) {
  const auto ds = build_dataset(5, 2, 3, short_config(), 11);
  EXPECT_EQ(ds.train.size(), 5u);
  EXPECT_EQ(ds.val.size(), 2u);
  EXPECT_EQ(ds.test.size(), 3u);
  std::set<std::string> ids;
  std::set<std::uint64_t> seeds;
  for (const auto* split : {&ds.train, &ds.val, &ds.test})
    for (const auto& ep : *split) {
      EXPECT_TRUE(ids.insert(ep.episode_id).second);
      EXPECT_TRUE(seeds.insert(ep.seed).second);
    }
}

TEST(BuildDataset, RejectsEmptySplit) { EXPECT_THROW(build_dataset(1, 0, 1, short_config(), 1), DataError); }

TEST(BuildDataset, RegenerationSerializesIdentically) {
  auto c = short_config();
  c.gap_count = 1;
  c.artifact_count = 3;
  const auto a = test::scratch_dir("synth_a");
  const auto b = test::scratch_dir("synth_b");
  write_dataset(a, build_dataset(3, 1, 1, c, 5));
  write_dataset(b, build_dataset(3, 1, 1, c, 5));
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a);
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 11u);  // 5 damaged + 5 truth + manifest
}

TEST(Manifest, EntryCarriesGroundTruth) {
  auto c = short_config();
  c.gap_count = 2;
  c.artifact_count = 2;
  auto ep = make_episode(c, 1, "ep00001");
  ep.split = "test";
  const auto j = manifest_entry(ep);
  EXPECT_EQ(j["episode_id"], "ep00001");
  EXPECT_EQ(j["split"], "test");
  EXPECT_EQ(j["length"], 720);
  ASSERT_EQ(j["gaps"].size(), 2u);
  EXPECT_EQ(j["gaps"][0][0].get<std::size_t>(), ep.gaps[0].start);
  EXPECT_EQ(j["gaps"][0][1].get<std::size_t>(), ep.gaps[0].length);
  ASSERT_EQ(j["artifacts"].size(), 2u);
}
