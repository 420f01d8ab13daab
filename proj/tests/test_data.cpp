#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <set>

#include "helpers.hpp"
#include "lid/data.hpp"

using namespace lid;
using lid::testing::max_abs_diff;

namespace {

Dataset labelled(const std::map<std::string, int>& counts) {
  Dataset ds;
  for (const auto& [label, n] : counts)
    for (int i = 0; i < n; ++i) {
      TrajectoryPair p;
      p.label = label;
      p.h_frames = Matrix::Zero(8, 9);
      p.r_frames = Matrix::Zero(8, 4);
      ds.pairs.push_back(p);
    }
  return ds;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("lid_test_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(WindowFeatures, PaperWidths) {
  Rng rng(81);
  EXPECT_EQ(window_features(rng.normal_matrix(10, 9), 5, FeatureKind::kPositions).rows(), 90);
  EXPECT_EQ(window_features(rng.normal_matrix(10, 4), 5, FeatureKind::kJoints).rows(), 20);
}

TEST(WindowFeatures, WidthIsWindowTimesFrameWidth) {
  Rng rng(82);
  for (int w = 1; w <= 6; ++w) {
    EXPECT_EQ(window_features(rng.normal_matrix(12, 6), w, FeatureKind::kPositions).rows(), w * 12);
    EXPECT_EQ(window_features(rng.normal_matrix(12, 3), w, FeatureKind::kJoints).rows(), w * 3);
    EXPECT_EQ(window_features(rng.normal_matrix(12, 3), w, FeatureKind::kJoints).cols(), 12 - w + 1);
  }
}

TEST(WindowFeatures, ConstantPositionsHaveZeroDeltas) {
  const Matrix frames = Matrix::Constant(10, 9, 0.7);
  const Matrix x = window_features(frames, 5, FeatureKind::kPositions);
  for (Eigen::Index k = 0; k < 90; k += 6) EXPECT_EQ(x.middleRows(k + 3, 3).cwiseAbs().maxCoeff(), 0.0);
}

TEST(WindowFeatures, LayoutMatchesHandIndexing) {
  Rng rng(83);
  const Matrix frames = rng.normal_matrix(9, 9);
  const Matrix x = window_features(frames, 5, FeatureKind::kPositions);
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (int f = 0; f < 5; ++f)
      for (int jt = 0; jt < 3; ++jt)
        for (int a = 0; a < 3; ++a) {
          const Eigen::Index t = j + f;
          const double pos = frames(t, jt * 3 + a);
          const double delta = t == 0 ? 0.0 : frames(t, jt * 3 + a) - frames(t - 1, jt * 3 + a);
          EXPECT_EQ(x(f * 18 + jt * 6 + a, j), pos);
          EXPECT_EQ(x(f * 18 + jt * 6 + 3 + a, j), delta);
        }
}

TEST(WindowFeatures, DeltasTelescope) {
  Rng rng(84);
  const Matrix frames = rng.normal_matrix(20, 9);
  const Matrix x = window_features(frames, 5, FeatureKind::kPositions);
  for (Eigen::Index j = 1; j < x.cols(); ++j)
    for (int c = 0; c < 9; ++c) {
      const int jt = c / 3;
      const int a = c % 3;
      double sum = 0.0;
      for (int f = 1; f < 5; ++f) sum += x(f * 18 + jt * 6 + 3 + a, j);
      EXPECT_NEAR(sum, frames(j + 4, c) - frames(j, c), 1e-12);
    }
}

TEST(WindowFeatures, TooShort) {
  EXPECT_THROW(window_features(Matrix::Zero(5, 9), 5, FeatureKind::kPositions), DataError);
  EXPECT_NO_THROW(window_features(Matrix::Zero(5, 4), 5, FeatureKind::kJoints));
  EXPECT_THROW(window_features(Matrix::Zero(4, 4), 5, FeatureKind::kJoints), DataError);
}

TEST(LastFrame, JointWindows) {
  Rng rng(85);
  const Matrix frames = rng.normal_matrix(8, 4);
  const Matrix last = last_frame(window_features(frames, 5, FeatureKind::kJoints), 4);
  for (Eigen::Index j = 0; j < last.cols(); ++j) EXPECT_EQ(max_abs_diff(last.col(j), frames.row(j + 4).transpose()), 0.0);
}

TEST(Downsample, ThirtyToTwenty) {
  for (Eigen::Index len : {3, 10, 31, 100}) {
    const auto idx = downsample_indices(len, 30.0, 20.0);
    EXPECT_EQ(static_cast<Eigen::Index>(idx.size()), (2 * len + 2) / 3);  // ceil(2T/3)
    for (std::size_t k = 0; k < idx.size(); ++k) EXPECT_EQ(idx[k], static_cast<Eigen::Index>(3 * (k / 2) + k % 2));
  }
}

TEST(Downsample, IdentityAndIntegerStride) {
  Rng rng(86);
  TrajectoryPair p;
  p.h_frames = rng.normal_matrix(30, 9);
  p.r_frames = rng.normal_matrix(30, 4);
  p.rate = 60.0;
  const TrajectoryPair same = downsample(p, 60.0);
  EXPECT_EQ(max_abs_diff(same.h_frames, p.h_frames), 0.0);
  const TrajectoryPair third = downsample(p, 20.0);
  ASSERT_EQ(third.length(), 10);
  for (Eigen::Index k = 0; k < 10; ++k) EXPECT_EQ(max_abs_diff(third.r_frames.row(k), p.r_frames.row(3 * k)), 0.0);
  EXPECT_DOUBLE_EQ(third.rate, 20.0);
}

TEST(Downsample, RejectsBadTargets) {
  TrajectoryPair p;
  p.h_frames = Matrix::Zero(4, 9);
  p.r_frames = Matrix::Zero(4, 4);
  p.rate = 30.0;
  EXPECT_THROW(downsample(p, 0.0), ConfigError);
  EXPECT_THROW(downsample(p, 60.0), ConfigError);
}

TEST(Retarget, HangingArm) {
  Vector frame(9);
  frame << 0, 0, 0, 0, 0, -0.3, 0, 0, -0.55;
  const Vector q = retarget_frame(frame, arm4());
  EXPECT_NEAR(q(3), 0.0, 1e-12);
  EXPECT_NEAR(q(1), 0.0, 1e-12);  // polar angle of straight down
}

TEST(Retarget, RightAngleElbow) {
  Vector frame(9);
  frame << 0, 0, 0, 0, 0, -0.3, 0.25, 0, -0.3;
  EXPECT_NEAR(retarget_frame(frame, arm4())(3), std::numbers::pi / 2, 1e-12);
}

TEST(Retarget, RoundTripThroughFk) {
  Rng rng(87);
  const KinematicChain c = arm4();
  for (int rep = 0; rep < 200; ++rep) {
    Vector q(4);
    q << rng.uniform(-2.5, 2.5), rng.uniform(0.1, 3.0), rng.uniform(-2.5, 2.5), rng.uniform(0.1, 2.8);
    const Vector frame = skeleton_from_joints(c, q);
    const Vector back = retarget_frame(frame, c);
    EXPECT_LT((fk(c, back) - frame.segment<3>(6)).norm(), 5e-3);
  }
}

TEST(Retarget, ZeroLengthSegment) {
  Matrix frames = Matrix::Zero(1, 9);
  frames(0, 8) = -0.5;
  EXPECT_THROW(retarget_skeleton(frames), DataError);
}

TEST(Synth, ZeroNoiseIsExactFunctionOfPhase) {
  Rng rng(88);
  SynthSpec spec;
  spec.interactions[0].noise = 0.0;
  spec.interactions[0].count = 5;
  const Dataset ds = synth_generate(spec, rng);
  const KinematicChain c = arm4();
  for (const auto& p : ds.pairs)
    for (Eigen::Index t = 0; t < p.length(); ++t)
      EXPECT_EQ(max_abs_diff(p.r_frames.row(t).transpose(), c.clamp(synth_second_agent(spec.interactions[0], p.phase(t)))),
                0.0);
}

TEST(Synth, FixedSeedIdentical) {
  SynthSpec spec;
  spec.interactions[0].count = 4;
  Rng a(89);
  Rng b(89);
  const Dataset da = synth_generate(spec, a);
  const Dataset db = synth_generate(spec, b);
  ASSERT_EQ(da.pairs.size(), db.pairs.size());
  for (std::size_t i = 0; i < da.pairs.size(); ++i) {
    EXPECT_EQ(max_abs_diff(da.pairs[i].h_frames, db.pairs[i].h_frames), 0.0);
    EXPECT_EQ(max_abs_diff(da.pairs[i].r_frames, db.pairs[i].r_frames), 0.0);
  }
}

TEST(Synth, BayesFloorIsNoiseVariance) {
  Rng rng(90);
  SynthSpec spec;
  spec.interactions[0].noise = 0.05;
  spec.interactions[0].count = 40;
  const Dataset ds = synth_generate(spec, rng);
  const KinematicChain c = arm4();
  double sq = 0.0;
  double n = 0.0;
  for (const auto& p : ds.pairs)
    for (Eigen::Index t = 0; t < p.length(); ++t) {
      const Vector ideal = c.clamp(synth_second_agent(spec.interactions[0], p.phase(t)));
      sq += (p.r_frames.row(t).transpose() - ideal).squaredNorm();
      n += 4.0;
    }
  // 16000 samples: relative standard error of the variance is about 1%
  EXPECT_NEAR(sq / n, 0.05 * 0.05, 0.05 * 0.05 * 0.05);
}

TEST(Synth, LabelsAndCounts) {
  Rng rng(91);
  SynthSpec spec;
  spec.interactions = {{"wave", 3, 50}, {"shake", 4, 60}};
  const Dataset ds = synth_generate(spec, rng);
  ASSERT_EQ(ds.pairs.size(), 7u);
  EXPECT_EQ(ds.pairs[0].label, "wave");
  EXPECT_EQ(ds.pairs[0].length(), 50);
  EXPECT_EQ(ds.pairs[6].label, "shake");
  EXPECT_EQ(ds.pairs[6].length(), 60);
  spec.interactions.clear();
  EXPECT_THROW(synth_generate(spec, rng), ConfigError);
}

TEST(Split, StratifiedRoundingOfPaperCounts) {
  const Dataset ds = labelled({{"waving", 32}, {"handshake", 38}, {"rocket", 70}, {"parachute", 49}});
  const Dataset s = split(ds, 0.8, 0);
  // per-label rounding: 26 + 30 + 56 + 39 of 189
  EXPECT_EQ(s.train.size(), 151u);
  EXPECT_EQ(s.test.size(), 38u);
}

TEST(Split, DisjointExhaustiveAndStratified) {
  const Dataset ds = labelled({{"a", 7}, {"b", 13}, {"c", 21}});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Dataset s = split(ds, 0.8, seed);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    for (auto i : s.test) EXPECT_TRUE(all.insert(i).second);
    EXPECT_EQ(all.size(), ds.pairs.size());
    std::map<std::string, int> train_count;
    std::map<std::string, int> total;
    for (auto i : s.train) ++train_count[ds.pairs[i].label];
    for (const auto& p : ds.pairs) ++total[p.label];
    for (const auto& [label, n] : total) EXPECT_LE(std::abs(train_count[label] - 0.8 * n), 1.0);
  }
}

TEST(Split, SameSeedSameSplitAndOpenInterval) {
  const Dataset ds = labelled({{"a", 10}, {"b", 10}});
  EXPECT_EQ(split(ds, 0.8, 5).train, split(ds, 0.8, 5).train);
  EXPECT_THROW(split(ds, 1.0, 0), ConfigError);
  EXPECT_THROW(split(ds, 0.0, 0), ConfigError);
}

TEST(Csv, RoundTripIsExact) {
  Rng rng(92);
  const auto dir = temp_dir("csv");
  std::filesystem::create_directories(dir);
  const Matrix m = rng.normal_matrix(6, 4) * 1e3;
  write_csv(dir / "m.csv", m, joint_header(4));
  std::vector<std::string> header;
  EXPECT_EQ(max_abs_diff(read_csv(dir / "m.csv", &header), m), 0.0);
  EXPECT_EQ(header, joint_header(4));
}

TEST(Csv, MalformedRowNamesLine) {
  const auto dir = temp_dir("bad_csv");
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "bad.csv");
    out << "a,b\n1,2\n3,x\n";
  }
  try {
    read_csv(dir / "bad.csv");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos);
  }
}

TEST(DatasetIo, SaveLoadRoundTrip) {
  Rng rng(93);
  SynthSpec spec;
  spec.interactions[0].count = 3;
  const Dataset ds = synth_generate(spec, rng);
  const auto dir = temp_dir("dataset");
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.pairs.size(), ds.pairs.size());
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    EXPECT_EQ(back.pairs[i].label, ds.pairs[i].label);
    EXPECT_EQ(max_abs_diff(back.pairs[i].h_frames, ds.pairs[i].h_frames), 0.0);
    EXPECT_EQ(max_abs_diff(back.pairs[i].r_frames, ds.pairs[i].r_frames), 0.0);
    EXPECT_EQ(max_abs_diff(back.pairs[i].partner_frames, ds.pairs[i].partner_frames), 0.0);
    EXPECT_EQ(max_abs_diff(back.pairs[i].phase, ds.pairs[i].phase), 0.0);
  }
}

TEST(DatasetIo, MissingManifestNamesPath) {
  const auto dir = temp_dir("nowhere");
  try {
    load_dataset(dir);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(dir.string()), std::string::npos);
    EXPECT_EQ(e.exit_code(), 3);
  }
}
