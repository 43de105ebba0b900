#include <gtest/gtest.h>

#include "vdpo/cli/run_config.hpp"
#include "vdpo/error.hpp"

using namespace vdpo;
using namespace vdpo::cli;

namespace {

ErrorKind kind_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "accepted: " << text;
  return ErrorKind::kInvalidArgument;
}

}  // namespace

TEST(RunConfig, EmptyDocumentGivesDefaults) {
  const auto c = parse_run_config("{}");
  EXPECT_EQ(c.model.vocab_size, 64u);
  EXPECT_EQ(c.model.image_dim, 16u);
  EXPECT_EQ(c.train.learning_rate, 5e-3);
  EXPECT_EQ(c.train.batch_size, 32u);
  EXPECT_EQ(c.train.epochs, 4u);
  EXPECT_EQ(c.train.objective, trainer::Objective::kVdpo);
  EXPECT_EQ(c.train.guidance.beta, 0.1);
  EXPECT_EQ(c.train.guidance.gamma, 0.75);
  EXPECT_EQ(c.data.count, 500u);
  EXPECT_FALSE(c.eval.sample);
}

TEST(RunConfig, EchoIsAFixedPoint) {
  const auto c = parse_run_config(
      R"({"model": {"seed": 3}, "data": {"gate_threshold": 1.25, "response_ratio": 0.3},
          "train": {"epochs": 2}, "objective": {"alpha": 0.05, "variant": "normalized",
          "uncond": "static"}, "eval": {"decode": "sample", "temperature": 0.7}})");
  EXPECT_NEAR(c.train.guidance.gamma, 0.5, 1e-15);
  EXPECT_EQ(c.train.guidance.uncond_source, objectives::UncondSource::kSftStatic);
  const auto text = run_config_to_json(c);
  const auto d = parse_run_config(text);
  EXPECT_EQ(run_config_to_json(d), text);
  EXPECT_EQ(d.model, c.model);
  EXPECT_EQ(d.data.world.gate_threshold, 1.25);
  EXPECT_EQ(d.eval.temperature, 0.7);
}

TEST(RunConfig, RejectsBadDocuments) {
  EXPECT_EQ(kind_of("not json"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of("[]"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"extra": {}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"model": {"vocab": 64}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"model": {"vocab_size": "64"}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"model": {"vocab_size": -1}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"model": {"vocab_size": 16}})"), ErrorKind::kConfig);  // world does not fit
  EXPECT_EQ(kind_of(R"({"model": 3})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"train": {"learning_rate": 0}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"data": {"response_ratio": 1.5}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"data": {"image_dim": 8}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"objective": {"gamma": 0.5, "alpha": 0.05}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"objective": {"gamma": 1.5}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"objective": {"name": "dpo", "gamma": 0.5}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"objective": {"name": "ppo"}})"), ErrorKind::kConfig);
  EXPECT_EQ(kind_of(R"({"eval": {"decode": "beam"}})"), ErrorKind::kConfig);
}

TEST(RunConfig, MissingFileIsAnIoError) {
  try {
    load_run_config("/nonexistent/config.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
}
