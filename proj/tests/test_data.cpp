#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "peeler/datasets.hpp"
#include "peeler/episodes.hpp"

using namespace peeler;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& contents) {
  const auto dir = fs::temp_directory_path() / "peeler_test_data";
  fs::create_directories(dir);
  const auto p = dir / name;
  std::ofstream(p) << contents;
  return p;
}

std::vector<std::size_t> all_classes(const LabeledDataset& ds) {
  std::vector<std::size_t> v(ds.n_classes());
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

TEST(Synthetic, CountsForced) {
  const auto ds = generate_gaussian_mixture({.n_classes = 2, .dim = 2, .samples_per_class = 5});
  EXPECT_EQ(ds.size(), 10u);
  EXPECT_EQ(ds.dim(), 2u);
  EXPECT_EQ(std::count(ds.labels.begin(), ds.labels.end(), 0u), 5);
  EXPECT_EQ(std::count(ds.labels.begin(), ds.labels.end(), 1u), 5);
}

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
  SyntheticSpec s{.n_classes = 4, .dim = 3, .samples_per_class = 7, .seed = 9};
  const auto a = generate_gaussian_mixture(s), b = generate_gaussian_mixture(s);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  s.seed = 10;
  EXPECT_FALSE(generate_gaussian_mixture(s).features == a.features);
}

TEST(Synthetic, TinySpreadGivesTinyVariance) {
  const auto ds = generate_gaussian_mixture({.n_classes = 3, .dim = 4, .samples_per_class = 50, .within_std = 1e-6});
  for (std::size_t c = 0; c < ds.n_classes(); ++c) {
    for (std::size_t m = 0; m < ds.dim(); ++m) {
      double mean = 0.0, ss = 0.0;
      for (auto i : ds.class_index[c]) mean += ds.features.at(i, m);
      mean /= static_cast<double>(ds.class_index[c].size());
      for (auto i : ds.class_index[c]) ss += (ds.features.at(i, m) - mean) * (ds.features.at(i, m) - mean);
      EXPECT_LT(ss / static_cast<double>(ds.class_index[c].size() - 1), 1e-10);
    }
  }
}

TEST(Synthetic, RejectsSingleClass) {
  EXPECT_THROW(generate_gaussian_mixture({.n_classes = 1}), ConfigError);
  EXPECT_THROW(generate_gaussian_mixture({.within_std = 0.0}), ConfigError);
}

// Class means approach the centers. The centers are recovered by regenerating
// with a near-zero spread, which leaves the center draws unchanged.
TEST(Synthetic, ClassMeansConvergeToCenters) {
  int passes = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticSpec s{.n_classes = 5, .dim = 4, .samples_per_class = 100, .within_std = 0.5, .seed = seed};
    const auto ds = generate_gaussian_mixture(s);
    s.within_std = 1e-300;
    const auto centers = generate_gaussian_mixture(s);
    const double bound = 4.0 * 0.5 / std::sqrt(100.0);
    bool ok = true;
    for (std::size_t c = 0; c < ds.n_classes(); ++c) {
      for (std::size_t m = 0; m < ds.dim(); ++m) {
        double mean = 0.0;
        for (auto i : ds.class_index[c]) mean += ds.features.at(i, m);
        mean /= 100.0;
        ok = ok && std::abs(mean - centers.features.at(centers.class_index[c][0], m)) < bound;
      }
    }
    passes += ok;
  }
  EXPECT_GE(passes, 9);
}

TEST(Delimited, LoadsRowsAndIgnoresHeader) {
  const auto plain = temp_file("plain.csv", "1.5,2,0\n3,4,1\n5,6.25,0\n");
  const auto header = temp_file("header.csv", "a,b,label\n1.5,2,0\n3,4,1\n5,6.25,0\n");
  const auto a = load_delimited(plain), b = load_delimited(header);
  EXPECT_EQ(a.size(), 3u);
  EXPECT_EQ(a.dim(), 2u);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_DOUBLE_EQ(a.features.at(2, 1), 6.25);
}

TEST(Delimited, ShortRowIsNamed) {
  const auto p = temp_file("short.csv", "1,2,0\n7\n3,4,1\n");
  try {
    load_delimited(p);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
}

TEST(Delimited, RemapsSparseLabels) {
  const auto p = temp_file("sparse.tsv", "0.5\t7\n1.5\t3\n2.5\t7\n");
  const auto ds = load_delimited(p, '\t');
  EXPECT_EQ(ds.n_classes(), 2u);
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{1, 0, 1}));
  EXPECT_EQ(ds.original_labels, (std::vector<long long>{3, 7}));
}

TEST(Delimited, RoundTripsBitwise) {
  const auto ds = generate_gaussian_mixture({.n_classes = 3, .dim = 5, .samples_per_class = 4, .seed = 3});
  const auto p = fs::temp_directory_path() / "peeler_test_data" / "round.csv";
  write_delimited(ds, p);
  const auto back = load_delimited(p);
  EXPECT_EQ(back.features, ds.features);
  EXPECT_EQ(back.labels, ds.labels);
}

TEST(Split, Counts) {
  const auto ds = generate_gaussian_mixture({.n_classes = 20, .samples_per_class = 2});
  const auto s = split_classes(ds, {0.5, 0.25, 0.25}, 1);
  EXPECT_EQ(s.train_classes.size(), 10u);
  EXPECT_EQ(s.val_classes.size(), 5u);
  EXPECT_EQ(s.test_classes.size(), 5u);
}

TEST(Split, EmptyPartNeedsFlag) {
  const auto ds = generate_gaussian_mixture({.n_classes = 6, .samples_per_class = 2});
  EXPECT_THROW(split_classes(ds, {1, 0, 0}, 1), ConfigError);
  const auto s = split_classes(ds, {1, 0, 0}, 1, true);
  EXPECT_EQ(s.train_classes.size(), 6u);
  EXPECT_TRUE(s.val_classes.empty());
  EXPECT_TRUE(s.test_classes.empty());
  EXPECT_THROW(split_classes(ds, {0.5, 0.5, 0.5}, 1), ConfigError);
}

TEST(Split, PartitionPropertyAndDeterminism) {
  for (std::size_t n = 3; n < 40; n += 3) {
    const auto ds = generate_gaussian_mixture({.n_classes = n, .dim = 1, .samples_per_class = 1});
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto s = split_classes(ds, {0.5, 0.2, 0.3}, seed, true);
      std::vector<std::size_t> all;
      for (const auto* part : {&s.train_classes, &s.val_classes, &s.test_classes})
        all.insert(all.end(), part->begin(), part->end());
      std::sort(all.begin(), all.end());
      EXPECT_EQ(all, all_classes(ds));
      const auto again = split_classes(ds, {0.5, 0.2, 0.3}, seed, true);
      EXPECT_EQ(again.train_classes, s.train_classes);
      EXPECT_EQ(again.test_classes, s.test_classes);
    }
  }
}

TEST(Holdout, PartitionsEachClass) {
  const auto ds = generate_gaussian_mixture({.n_classes = 4, .samples_per_class = 10});
  const auto h = holdout_samples(ds, 0.2, 3);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(h.held[c].size(), 2u);
    EXPECT_EQ(h.train[c].size(), 8u);
    std::vector<std::size_t> both = h.held[c];
    both.insert(both.end(), h.train[c].begin(), h.train[c].end());
    std::sort(both.begin(), both.end());
    EXPECT_EQ(both, ds.class_index[c]);
  }
}

// ---------------------------------------------------------------------------

TEST(FewShotEpisode, CountsForced) {
  const auto ds = generate_gaussian_mixture({.n_classes = 12, .dim = 2, .samples_per_class = 40});
  Rng rng(1);
  const auto ep = sample_fewshot_episode(ds, all_classes(ds), {5, 1, 15, 5, 15}, rng);
  EXPECT_EQ(ep.support.size(), 5u);
  EXPECT_EQ(ep.closed_query.size(), 75u);
  EXPECT_EQ(ep.open_query.size(), 75u);
  EXPECT_EQ(ep.way(), 5u);
}

TEST(FewShotEpisode, TenClassPoolSplitsFiveAndFive) {
  const auto ds = generate_gaussian_mixture({.n_classes = 10, .dim = 2, .samples_per_class = 20});
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto ep = sample_fewshot_episode(ds, all_classes(ds), {5, 1, 15, 5, 4}, rng);
    std::vector<std::size_t> all = ep.seen_classes;
    all.insert(all.end(), ep.unseen_classes.begin(), ep.unseen_classes.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, all_classes(ds));
  }
}

TEST(FewShotEpisode, NoOpenClassesGivesClosedEpisode) {
  const auto ds = generate_gaussian_mixture({.n_classes = 6, .dim = 2, .samples_per_class = 20});
  Rng rng(1);
  const auto ep = sample_fewshot_episode(ds, all_classes(ds), {5, 2, 3, 0, 15}, rng);
  EXPECT_TRUE(ep.open_query.empty());
  EXPECT_TRUE(ep.unseen_classes.empty());
  EXPECT_EQ(ep.support.size(), 10u);
}

TEST(FewShotEpisode, StructuralInvariants) {
  const auto ds = generate_gaussian_mixture({.n_classes = 15, .dim = 2, .samples_per_class = 25});
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const EpisodeConfig cfg{3 + seed % 3, 1 + seed % 4, 5, seed % 4, 3};
    const auto ep = sample_fewshot_episode(ds, all_classes(ds), cfg, rng);
    for (auto s : ep.seen_classes)
      EXPECT_EQ(std::count(ep.unseen_classes.begin(), ep.unseen_classes.end(), s), 0);
    std::set<std::size_t> support(ep.support.begin(), ep.support.end());
    for (auto q : ep.closed_query) EXPECT_EQ(support.count(q), 0u);
    for (std::size_t i = 0; i < ep.support.size(); ++i)
      EXPECT_EQ(ds.labels[ep.support[i]], ep.seen_classes[ep.support_labels[i]]);
    for (std::size_t i = 0; i < ep.closed_query.size(); ++i)
      EXPECT_EQ(ds.labels[ep.closed_query[i]], ep.seen_classes[ep.closed_labels[i]]);
    for (auto q : ep.open_query) {
      EXPECT_EQ(std::count(ep.unseen_classes.begin(), ep.unseen_classes.end(), ds.labels[q]), 1);
    }
    EXPECT_EQ(ep.open_query.size(), cfg.open_way * cfg.open_query_per_class);
  }
}

TEST(FewShotEpisode, PoolTooSmallIsRejected) {
  const auto ds = generate_gaussian_mixture({.n_classes = 6, .dim = 2, .samples_per_class = 20});
  Rng rng(1);
  EXPECT_THROW(sample_fewshot_episode(ds, all_classes(ds), {5, 1, 15, 5, 15}, rng), DataError);
}

// Each class should be seen with frequency N/P and unseen with M/P.
TEST(FewShotEpisode, ClassRolesAreUniform) {
  const auto ds = generate_gaussian_mixture({.n_classes = 12, .dim = 1, .samples_per_class = 3});
  const auto pool = all_classes(ds);
  const EpisodeConfig cfg{5, 1, 1, 5, 1};
  std::vector<int> seen(12, 0), unseen(12, 0);
  const int n_episodes = 10000;
  for (int e = 0; e < n_episodes; ++e) {
    Rng rng = derive_rng(7, Purpose::kTrainEpisode, e);
    const auto ep = sample_fewshot_episode(ds, pool, cfg, rng);
    for (auto c : ep.seen_classes) ++seen[c];
    for (auto c : ep.unseen_classes) ++unseen[c];
  }
  const double expect_seen = n_episodes * 5.0 / 12.0, expect_unseen = n_episodes * 5.0 / 12.0;
  for (std::size_t c = 0; c < 12; ++c) {
    EXPECT_NEAR(seen[c], expect_seen, 0.2 * expect_seen) << "class " << c;
    EXPECT_NEAR(unseen[c], expect_unseen, 0.2 * expect_unseen) << "class " << c;
  }
}

TEST(FewShotEpisode, PerEpisodeStreamsAreOrderIndependent) {
  const auto ds = generate_gaussian_mixture({.n_classes = 12, .dim = 2, .samples_per_class = 20});
  const auto pool = all_classes(ds);
  auto draw = [&](std::uint64_t i) {
    Rng rng = derive_rng(3, Purpose::kTrainEpisode, i);
    return sample_fewshot_episode(ds, pool, {5, 1, 3, 2, 3}, rng);
  };
  std::map<std::uint64_t, Episode> forward, backward;
  for (std::uint64_t i = 0; i < 20; ++i) forward[i] = draw(i);
  for (std::uint64_t i = 20; i-- > 0;) backward[i] = draw(i);
  for (std::uint64_t i = 0; i < 20; ++i) {
    EXPECT_EQ(forward[i].support, backward[i].support);
    EXPECT_EQ(forward[i].open_query, backward[i].open_query);
  }
}

TEST(LargeScaleBatch, CountsForced) {
  const auto ds = generate_gaussian_mixture({.n_classes = 6, .dim = 2, .samples_per_class = 20});
  Rng rng(4);
  const auto ep = sample_largescale_batch(ds, all_classes(ds), 2, 4, rng);
  EXPECT_EQ(ep.closed_query.size(), 16u);
  EXPECT_EQ(ep.open_query.size(), 8u);
  EXPECT_TRUE(ep.support.empty());
  EXPECT_EQ(ep.seen_classes.size(), 4u);
  EXPECT_EQ(ep.seen_slots.size(), 4u);
}

TEST(LargeScaleBatch, SameSeedSamePartition) {
  const auto ds = generate_gaussian_mixture({.n_classes = 6, .dim = 2, .samples_per_class = 20});
  Rng a(5), b(5);
  const auto x = sample_largescale_batch(ds, all_classes(ds), 2, 4, a);
  const auto y = sample_largescale_batch(ds, all_classes(ds), 2, 4, b);
  EXPECT_EQ(x.seen_classes, y.seen_classes);
  EXPECT_EQ(x.unseen_classes, y.unseen_classes);
  EXPECT_EQ(x.closed_query, y.closed_query);
}

TEST(LargeScaleBatch, RespectsMemberRestriction) {
  const auto ds = generate_gaussian_mixture({.n_classes = 6, .dim = 2, .samples_per_class = 20});
  const auto h = holdout_samples(ds, 0.25, 1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto ep = sample_largescale_batch(ds, all_classes(ds), 2, 5, rng, &h.train);
    for (auto i : ep.closed_query) {
      const auto& held = h.held[ds.labels[i]];
      EXPECT_EQ(std::count(held.begin(), held.end(), i), 0);
    }
  }
  Rng rng(0);
  EXPECT_THROW(sample_largescale_batch(ds, all_classes(ds), 6, 5, rng), DataError);
  EXPECT_THROW(sample_largescale_batch(ds, all_classes(ds), 0, 5, rng), DataError);
}
