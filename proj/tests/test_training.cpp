#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "fullglow/config.hpp"
#include "fullglow/training.hpp"

using namespace fullglow;
namespace fs = std::filesystem;

namespace {

ModelConfig small(ConditioningMode mode = ConditioningMode::full) {
  ModelConfig c;
  c.n_blocks = 2;
  c.n_flows = 2;
  c.image_size = 8;
  c.coupling_hidden = 8;
  c.conditioning = mode;
  c.seed = 5;
  return c;
}

std::vector<PairedSample> scenes(std::size_t n, std::uint64_t first, std::size_t size = 8) {
  std::vector<PairedSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_scene(first + i, size));
  return out;
}

std::vector<Tensor<double>> grads(FullGlow<double>& m) {
  std::vector<Tensor<double>> g;
  for (auto* p : m.parameters()) g.push_back(p->grad);
  return g;
}

std::string corrupt(std::string bytes, std::size_t at, char value) {
  bytes[at] = value;
  return bytes;
}

}  // namespace

TEST(Checkpointing, MatchesPlainGradients) {
  for (bool boundary : {false, true}) {
    ModelConfig c = small();
    c.use_boundary = boundary;
    c.n_blocks = 3;
    FullGlow<double> m(c);
    const auto data = scenes(4, 1);
    TrainConfig tc;
    tc.init_batch_size = 4;
    const auto init = initialization_batch<double>(data, tc, boundary);
    m.initialize(init.source, init.target, boundary ? &init.boundary : nullptr);
    const auto b = training_batch<double>(data, tc, boundary, 0);
    const Tensor<double>* bnd = boundary ? &b.boundary : nullptr;

    m.zero_grad();
    const auto plain = loss_and_gradients(m, b.source, b.target, 0.3, false, bnd);
    const auto g_plain = grads(m);
    m.zero_grad();
    const auto ckpt = loss_and_gradients(m, b.source, b.target, 0.3, true, bnd);
    const auto g_ckpt = grads(m);

    EXPECT_NEAR(plain.loss, ckpt.loss, 1e-12 * std::abs(plain.loss));
    double worst = 0;
    for (std::size_t i = 0; i < g_plain.size(); ++i) worst = std::max(worst, relative_error(g_ckpt[i], g_plain[i]));
    EXPECT_LT(worst, 1e-10);
    EXPECT_EQ(ckpt.stored_tensors, 4 * (m.segment_count() + 1));
    EXPECT_LT(ckpt.stored_elements, plain.stored_elements);
  }
}

TEST(Training, LossFallsOnSmallSet) {
  FullGlow<float> m(small());
  TrainState<float> st;
  TrainConfig tc;
  tc.iterations = 200;
  tc.init_batch_size = 8;
  tc.learning_rate = 1e-3;
  tc.seed = 1;
  const auto trace = train(m, st, scenes(8, 10), tc);
  ASSERT_EQ(trace.size(), 200u);
  auto avg = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 20; ++i) s += trace[i].loss;
    return s / 20;
  };
  EXPECT_LT(avg(180), avg(0));
  EXPECT_EQ(st.iteration, 200u);
  EXPECT_EQ(st.adam.step, 200u);
}

TEST(Training, DeterministicForSeed) {
  auto run = [] {
    FullGlow<float> m(small());
    TrainState<float> st;
    TrainConfig tc;
    tc.iterations = 5;
    tc.init_batch_size = 4;
    tc.seed = 3;
    train(m, st, scenes(4, 20), tc);
    return encode_checkpoint(m, st);
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, BatchesDependOnlyOnSeedAndIteration) {
  const auto data = scenes(6, 30);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.seed = 9;
  const auto a = training_batch<float>(data, tc, false, 17), b = training_batch<float>(data, tc, false, 17);
  EXPECT_EQ(a.source, b.source);
  EXPECT_EQ(a.target, b.target);
  EXPECT_EQ(a.source.shape(), (Shape{2, 3, 8, 8}));
  EXPECT_NE(training_batch<float>(data, tc, false, 18).target, a.target);
}

TEST(Training, DivergenceReportsIteration) {
  FullGlow<float> m(small());
  TrainState<float> st;
  TrainConfig tc;
  tc.iterations = 50;
  tc.init_batch_size = 4;
  tc.learning_rate = 1e6;
  try {
    train(m, st, scenes(4, 40), tc);
    FAIL() << "expected divergence";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("training diverged at iteration"), std::string::npos) << msg;
    EXPECT_NE(msg.find("last finite loss"), std::string::npos);
  }
}

TEST(Training, ConfigValidation) {
  TrainConfig tc;
  tc.learning_rate = -1;
  tc.batch_size = 0;
  try {
    tc.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("lr must be"), std::string::npos);
    EXPECT_NE(msg.find("batch_size"), std::string::npos);
  }
  FullGlow<float> m(small());
  TrainState<float> st;
  EXPECT_THROW(train(m, st, {}, TrainConfig{}), ConfigError);
  EXPECT_THROW(train(m, st, scenes(2, 0, 16), TrainConfig{}), ConfigError);
}

TEST(Persistence, SaveLoadSaveIsIdentity) {
  FullGlow<float> m(small());
  TrainState<float> st;
  TrainConfig tc;
  tc.iterations = 3;
  tc.init_batch_size = 4;
  train(m, st, scenes(4, 50), tc);
  const std::string bytes = encode_checkpoint(m, st);
  auto loaded = decode_checkpoint<float>(bytes);
  EXPECT_EQ(encode_checkpoint(loaded.model, loaded.state), bytes);
  EXPECT_TRUE(loaded.model.initialized());
  EXPECT_EQ(loaded.state.iteration, 3u);

  const fs::path path = fs::temp_directory_path() / "fullglow_test.ckpt";
  save_checkpoint(path, m, st);
  EXPECT_EQ(encode_checkpoint(load_checkpoint<float>(path).model, st), bytes);
  fs::remove(path);
  EXPECT_THROW(load_checkpoint<float>(path), IoError);
}

TEST(Persistence, ResumeMatchesUninterruptedRun) {
  const auto data = scenes(4, 60);
  TrainConfig tc;
  tc.iterations = 6;
  tc.init_batch_size = 4;
  tc.seed = 2;
  FullGlow<float> full(small());
  TrainState<float> fs_state;
  train(full, fs_state, data, tc);

  FullGlow<float> part(small());
  TrainState<float> ps;
  TrainConfig half = tc;
  half.iterations = 3;
  train(part, ps, data, half);
  auto resumed = decode_checkpoint<float>(encode_checkpoint(part, ps));
  train(resumed.model, resumed.state, data, tc);
  EXPECT_EQ(encode_checkpoint(resumed.model, resumed.state), encode_checkpoint(full, fs_state));
}

TEST(Persistence, MalformedCheckpointsAreRejected) {
  FullGlow<float> m(small());
  TrainState<float> st;
  const std::string bytes = encode_checkpoint(m, st);
  auto message = [](const std::string& b) {
    try {
      decode_checkpoint<float>(b);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  EXPECT_NE(message(corrupt(bytes, 0, 'X')).find("bad magic"), std::string::npos);
  EXPECT_NE(message(corrupt(bytes, 4, 9)).find("unsupported checkpoint version 9"), std::string::npos);
  EXPECT_NE(message(bytes.substr(0, bytes.size() - 3)).find("truncated at byte"), std::string::npos);
  EXPECT_NE(message(bytes + "x").find("trailing bytes"), std::string::npos);

  // A checkpoint from a differently shaped model names the offending parameter.
  ModelConfig other = small();
  other.coupling_hidden = 4;
  FullGlow<float> m2(other);
  std::string swapped = encode_checkpoint(m2, st);
  const std::string hidden8 = "coupling_hidden=4";
  swapped.replace(swapped.find(hidden8), hidden8.size(), "coupling_hidden=8");
  EXPECT_NE(message(swapped).find("has shape"), std::string::npos);
}

TEST(Config, ParsesAndListsUnknownKeys) {
  const auto rc = parse_run_config("# comment\nn_flows = 3\nlr=0.001\nconditioning_mode = coupling_only\n");
  EXPECT_EQ(rc.model.n_flows, 3u);
  EXPECT_DOUBLE_EQ(rc.train.learning_rate, 0.001);
  EXPECT_EQ(rc.model.conditioning, ConditioningMode::coupling_only);
  try {
    parse_run_config("bogus=1\nn_flows=abc\nalso_bogus=2\n");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("bogus"), std::string::npos);
    EXPECT_NE(msg.find("also_bogus"), std::string::npos);
    EXPECT_NE(msg.find("n_flows"), std::string::npos);
  }
  EXPECT_THROW(parse_key_values("a=1\na=2\n"), ConfigError);
  EXPECT_THROW(parse_key_values("no equals sign\n"), ConfigError);
  EXPECT_THROW(parse_run_config("temperature=-1\n"), ConfigError);
}

TEST(Config, ModelTextRoundTrips) {
  ModelConfig c = small(ConditioningMode::unconditional);
  c.lambda = 0.1 + 0.2;
  c.temperature = 1.0 / 3.0;
  c.use_boundary = true;
  c.boundary_mode = BoundaryMode::binary;
  const auto back = parse_model_config(model_config_text(c));
  EXPECT_EQ(model_config_text(back), model_config_text(c));
  EXPECT_EQ(back.lambda, c.lambda);
  EXPECT_EQ(back.temperature, c.temperature);
}

TEST(Evaluation, MeanBpdIsDeterministic) {
  FullGlow<float> m(small());
  const auto data = scenes(3, 70);
  TrainConfig tc;
  tc.init_batch_size = 3;
  const auto init = initialization_batch<float>(data, tc, false);
  m.initialize(init.source, init.target);
  EXPECT_EQ(mean_bpd(m, data, 1), mean_bpd(m, data, 1));
  EXPECT_TRUE(std::isfinite(mean_bpd(m, data, 1)));
}
