#include <gtest/gtest.h>

#include "peeler/config.hpp"

using namespace peeler;

TEST(Config, PaperFewShotPreset) {
  const auto c = parse_config("preset = paper-fewshot\n");
  EXPECT_EQ(c.episode.way, 5u);
  EXPECT_EQ(c.episode.open_way, 5u);
  EXPECT_EQ(c.lambda, 0.5);
  EXPECT_EQ(c.lr, 1e-3);
  EXPECT_EQ(c.schedule.milestones, (std::vector<std::uint64_t>{10000, 20000}));
  EXPECT_EQ(c.episodes, 30000u);
  EXPECT_EQ(c.eval_episodes, 600u);
}

TEST(Config, PaperLargeScalePresetSplitsFourAndTwo) {
  const auto c = preset("paper-largescale");
  EXPECT_TRUE(c.large_scale());
  EXPECT_EQ(c.episode.open_way, 2u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, RoundTripsThroughSerialization) {
  auto c = preset("paper-fewshot");
  c.hidden = {7, 3};
  c.lambda = 0.1;
  c.synthetic.within_std = 1.0 / 3.0;
  c.reduction = Reduction::kSum;
  c.out = "runs/x";
  const auto back = parse_config(serialize_config(c));
  EXPECT_EQ(serialize_config(back), serialize_config(c));
  EXPECT_EQ(back.synthetic.within_std, c.synthetic.within_std);
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    parse_config("way = 5\nlamda = 0.5\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lamda"), std::string::npos);
  }
}

TEST(Config, BadValuesAreRejected) {
  EXPECT_THROW(parse_config("way = five\n"), ConfigError);
  EXPECT_THROW(parse_config("head = cosine\n"), ConfigError);
  EXPECT_THROW(parse_config("no equals sign\n"), ConfigError);
  EXPECT_THROW(parse_config("way = 5\npreset = desk\n"), ConfigError);
  EXPECT_THROW(parse_config("preset = huge\n"), ConfigError);
  EXPECT_THROW(parse_config("synthetic.classes = 1\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("head = linear\n").validate(), ConfigError);
}

TEST(Config, HashIgnoresRunPlumbing) {
  TrainConfig a, b;
  b.out = "elsewhere";
  b.workers = 8;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, CommentsAndWhitespace) {
  const auto c = parse_config("  # comment\n\nway= 7 # trailing\n  lambda =0.25\n");
  EXPECT_EQ(c.episode.way, 7u);
  EXPECT_EQ(c.lambda, 0.25);
}

TEST(Sha256, KnownDigest) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
