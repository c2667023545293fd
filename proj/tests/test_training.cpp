#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "mvt/errors.hpp"
#include "mvt/training.hpp"

using namespace mvt;
using namespace mvt::testing;

namespace {

const SceneData& scene8() {
  static const std::vector<SceneData> scenes = simulate(tiny_sim(31, 8, 3, 6), "training8");
  return scenes[0];
}

TrainingConfig tiny_training(int steps) {
  TrainingConfig c;
  c.model = tiny_tracker(4, 2);
  c.augment.view_drop = false;
  c.augment.max_tracks = 4;
  c.optimizer.lr = Real(3e-3);
  c.optimizer.weight_decay = 0;
  c.steps = steps;
  c.warmup_steps = 2;
  c.checkpoint_every = 0;
  c.seed = 5;
  return c;
}

double bce(double logit, double label) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  return -(label * std::log(p) + (1 - label) * std::log(1 - p));
}

std::vector<Real> grads(const TrackerModel& model) {
  std::vector<Real> g;
  for (const auto& p : model.params().items()) {
    if (p.tensor.has_grad()) g.insert(g.end(), p.tensor.grad().begin(), p.tensor.grad().end());
  }
  return g;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("xyz loss hand values") {
  const Tensor zero = Tensor::zeros({1, 3});
  CHECK(loss_xyz({{zero, {0, 0, 0}, {1}, 1}}, 1, 0.8).item() == 0.0f);
  CHECK(loss_xyz({{zero, {1, -2, 3}, {1}, 1}}, 1, 0.8).item() == doctest::Approx(6.0));
  // J=1, M=2, per-iteration errors 4 and 2: (0.8 * 4 + 1 * 2) / 2.
  const Tensor it1 = Tensor::from({1, 3}, {4, 0, 0});
  const Tensor it2 = Tensor::from({1, 3}, {0, 2, 0});
  CHECK(loss_xyz({{it1, {0, 0, 0}, {1}, 1}, {it2, {0, 0, 0}, {1}, 2}}, 2, 0.8).item() == doctest::Approx(2.6));
  // With M=1 the only iteration has weight gamma^0.
  CHECK(loss_xyz({{it1, {0, 0, 0}, {1}, 1}}, 1, 0.3).item() == doctest::Approx(4.0));
  CHECK(loss_xyz({}, 2, 0.8).item() == 0.0f);
}

TEST_CASE("xyz loss with gamma 1 is the mean L1 error over unmasked rows") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<XyzTerm> terms;
  double total = 0;
  int rows = 0;
  for (int m = 1; m <= 3; ++m) {
    std::vector<Real> p(5 * 3), g(5 * 3);
    std::vector<uint8_t> mask(5);
    for (int q = 0; q < 5; ++q) {
      mask[q] = (q + m) % 3 != 0;
      for (int a = 0; a < 3; ++a) {
        p[q * 3 + a] = static_cast<Real>(u(rng));
        g[q * 3 + a] = static_cast<Real>(u(rng));
        if (mask[q]) total += std::abs(p[q * 3 + a] - g[q * 3 + a]);
      }
      rows += mask[q];
    }
    terms.push_back({Tensor::from({5, 3}, p), g, mask, m});
  }
  CHECK(loss_xyz(terms, 3, 1.0).item() == doctest::Approx(total / rows).epsilon(1e-6));
}

TEST_CASE("masked rows receive exactly zero gradient") {
  Tensor pred = Tensor::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}, true);
  loss_xyz({{pred, {0, 0, 0, 0, 0, 0, 0, 0, 0}, {1, 0, 1}, 1}}, 1, 0.8).backward();
  for (int a = 0; a < 3; ++a) {
    CHECK(pred.grad()[3 + a] == 0.0f);
    CHECK(pred.grad()[a] != 0.0f);
  }
  Tensor logits = Tensor::from({3}, {0.3f, -1.0f, 2.0f}, true);
  loss_vis({{logits, {1, 0, 0}, {1, 1, 0}}}).backward();
  CHECK(logits.grad()[2] == 0.0f);
  CHECK(logits.grad()[0] != 0.0f);
}

TEST_CASE("balanced BCE hand values") {
  // 2 visible + 1 occluded, all logits 0: w1 = 0.75, w0 = 1.5, loss = ln 2.
  const Tensor zeros = Tensor::zeros({3});
  CHECK(loss_vis({{zeros, {1, 1, 0}, {1, 1, 1}}}).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-6));

  // Balanced classes reduce to plain BCE.
  const std::vector<Real> logits = {0.3f, -1.2f, 2.0f, 0.7f};
  const std::vector<Real> labels = {1, 0, 0, 1};
  double plain = 0;
  for (int i = 0; i < 4; ++i) plain += bce(logits[i], labels[i]) / 4;
  CHECK(loss_vis({{Tensor::from({4}, logits), labels, {1, 1, 1, 1}}}).item() == doctest::Approx(plain).epsilon(1e-6));

  // Confident correct predictions go to zero.
  CHECK(loss_vis({{Tensor::from({2}, {30.0f, -30.0f}), {1, 0}, {1, 1}}}).item() < 1e-6);

  // A missing class leaves the present one with weight 1.
  const double one_class = (bce(0.5, 1) + bce(-0.25, 1)) / 2;
  CHECK(loss_vis({{Tensor::from({2}, {0.5f, -0.25f}), {1, 1}, {1, 1}}}).item() ==
        doctest::Approx(one_class).epsilon(1e-6));
}

TEST_CASE("balanced BCE is symmetric under label and sign swap") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Real> l(7), flipped(7), y(7), ny(7);
    for (int i = 0; i < 7; ++i) {
      l[i] = static_cast<Real>(u(rng));
      flipped[i] = -l[i];
      y[i] = (rng() % 3 == 0) ? 1 : 0;
      ny[i] = 1 - y[i];
    }
    const std::vector<uint8_t> mask = {1, 1, 1, 1, 1, 0, 1};
    const double a = loss_vis({{Tensor::from({7}, l), y, mask}}).item();
    const double b = loss_vis({{Tensor::from({7}, flipped), ny, mask}}).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-6));
  }
}

TEST_CASE("augmentation off leaves the scene untouched") {
  const SceneData& scene = scene8();
  AugmentConfig cfg;
  cfg.view_drop = false;
  cfg.max_tracks = 0;
  std::mt19937_64 rng(1);
  const auto s = augment_sample(scene, rng, cfg);
  REQUIRE(s->clip.views.size() == static_cast<size_t>(scene.num_views()));
  for (int v = 0; v < scene.num_views(); ++v) {
    for (int t = 0; t < scene.num_frames(); ++t) {
      const Camera& c = s->clip.views[v].cameras[t];
      CHECK(c.E == scene.cameras[v].at(t).E);
      CHECK(s->clip.views[v].depth[t]->values.size() == scene.depth[v][t].values.size());
      for (size_t i = 0; i < scene.depth[v][t].values.size(); ++i) {
        const float a = s->clip.views[v].depth[t]->values[i], b = scene.depth[v][t].values[i];
        CHECK(((std::isnan(a) && std::isnan(b)) || a == b));
      }
    }
  }
  REQUIRE(s->queries.size() == scene.queries.size());
  for (size_t i = 0; i < scene.queries.size(); ++i) {
    CHECK(s->queries[i].xyz == scene.queries[i].xyz);
    CHECK(s->ground_truth[i].positions == scene.ground_truth[i].positions);
    CHECK(s->ground_truth[i].visible == scene.ground_truth[i].visible);
  }
}

TEST_CASE("dropping to one view fuses only that view") {
  const SceneData& scene = scene8();
  AugmentConfig cfg;
  cfg.view_drop = true;
  cfg.max_tracks = 0;
  std::unique_ptr<Sample> s;
  std::set<size_t> counts;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    std::mt19937_64 rng(seed);
    auto candidate = augment_sample(scene, rng, cfg);
    counts.insert(candidate->clip.views.size());
    if (!s && candidate->clip.views.size() == 1) s = std::move(candidate);
  }
  CHECK(counts == std::set<size_t>{1, 2, 3});
  REQUIRE(s);
  NoGradGuard guard;
  TrackerModel model(tiny_tracker(), 1);
  const EncodedClip dropped = encode_clip(model, s->clip);
  const EncodedClip alone = encode_clip(model, make_clip(scene, s->view_ids));
  for (int t = 0; t < scene.num_frames(); ++t) {
    for (int sc = 0; sc < model.config().levels(); ++sc) {
      CHECK(dropped.clouds[t][sc]->positions == alone.clouds[t][sc]->positions);
      CHECK(dropped.clouds[t][sc]->feature_rows == alone.clouds[t][sc]->feature_rows);
    }
  }
}

TEST_CASE("depth noise has the half-normal mean absolute perturbation") {
  DepthMap d(1000, 1000);
  std::fill(d.values.begin(), d.values.end(), 2.0f);
  d.values[0] = std::numeric_limits<float>::quiet_NaN();
  d.values[1] = 0.0f;
  const double sigma = 0.02;
  std::mt19937_64 rng(11);
  add_depth_noise(d, sigma, rng);
  CHECK(std::isnan(d.values[0]));
  CHECK(d.values[1] == 0.0f);
  double sum = 0;
  for (size_t i = 2; i < d.values.size(); ++i) sum += std::abs(static_cast<double>(d.values[i]) - 2.0);
  const double mean = sum / static_cast<double>(d.values.size() - 2);
  CHECK(std::abs(mean / (sigma * std::sqrt(2.0 / std::numbers::pi)) - 1.0) < 0.05);
}

TEST_CASE("learning rate schedule") {
  TrainingConfig c;
  c.optimizer.lr = 1.0f;
  c.steps = 110;
  c.warmup_steps = 10;
  c.min_lr_ratio = 0.1;
  CHECK(learning_rate(c, 0) == doctest::Approx(0.1));
  CHECK(learning_rate(c, 9) == doctest::Approx(1.0));
  CHECK(learning_rate(c, 10) == doctest::Approx(1.0));
  CHECK(learning_rate(c, 60) == doctest::Approx(0.55));
  CHECK(learning_rate(c, 110) == doctest::Approx(0.1));
  for (int k = 10; k < 110; ++k) CHECK(learning_rate(c, k + 1) <= learning_rate(c, k));
}

TEST_CASE("training config JSON round trip") {
  TrainingConfig c = tiny_training(17);
  c.loss.gamma = 0.6;
  c.augment.depth_noise = 0.01;
  const TrainingConfig back = training_config_from_json(training_config_to_json(c));
  CHECK(training_config_to_json(back) == training_config_to_json(c));
  nlohmann::json bad = training_config_to_json(c);
  bad["loss"]["gamma"] = 0.0;
  CHECK_THROWS_AS(training_config_from_json(bad), ValidationError);
  bad = training_config_to_json(c);
  bad["steps"] = "many";
  CHECK_THROWS_AS(training_config_from_json(bad), ValidationError);
}

TEST_CASE("ground truth before the query frame does not affect the loss") {
  const SceneData& scene = scene8();
  TrainingConfig cfg = tiny_training(1);
  TrackerModel model(cfg.model, 2);
  randomize_heads(model, 2);
  std::mt19937_64 rng(0);
  auto s = augment_sample(scene, rng, cfg.augment);
  s->queries[0].query_frame = 5;
  s->queries[0].xyz = s->ground_truth[0].positions[5];

  auto run = [&] {
    model.params().zero_grad();
    SampleLoss l = sample_loss(model, *s, cfg);
    const double v = l.total.item();
    l.total.backward();
    return std::make_pair(v, grads(model));
  };
  const auto [v1, g1] = run();
  for (int t = 0; t < 5; ++t) {
    s->ground_truth[0].positions[t] += Vec3(3, -2, 1);
    s->ground_truth[0].visible[t] = !s->ground_truth[0].visible[t];
  }
  const auto [v2, g2] = run();
  CHECK(v1 == v2);
  CHECK(g1 == g2);
}

TEST_CASE("loss decreases on a fixed two-track scene") {
  static const std::vector<SceneData> scenes = simulate(tiny_sim(41, 6, 2, 2), "training2");
  TrainingConfig cfg = tiny_training(200);
  cfg.model.window = 6;
  cfg.augment.max_tracks = 0;
  const fs::path dir = temp_dir("train2");
  std::vector<double> losses;
  train(cfg, scenes, {dir / "ck.bin", dir / "log.csv", false},
        [&](int64_t, const StepLosses& l) { losses.push_back(l.loss); });
  REQUIRE(losses.size() == 200);
  CHECK(losses.back() < losses.front());
  fs::remove_all(dir);
}

TEST_CASE("training is reproducible and resumes exactly") {
  const std::vector<SceneData> scenes = {scene8()};
  TrainingConfig cfg = tiny_training(6);
  cfg.augment.view_drop = true;
  cfg.augment.depth_noise = 0.01;
  cfg.checkpoint_every = 3;
  const fs::path dir = temp_dir("resume");

  train(cfg, scenes, {dir / "a.bin", dir / "a.csv", false});
  train(cfg, scenes, {dir / "b.bin", dir / "b.csv", false});
  CHECK(read_text(dir / "a.csv") == read_text(dir / "b.csv"));
  CHECK(read_file(dir / "a.bin") == read_file(dir / "b.bin"));

  // Interrupt during step 4 (after the step-3 checkpoint), then resume.
  struct Interrupt {};
  CHECK_THROWS_AS(train(cfg, scenes, {dir / "c.bin", dir / "c.csv", false},
                        [](int64_t k, const StepLosses&) {
                          if (k == 3) throw Interrupt{};
                        }),
                  Interrupt);
  train(cfg, scenes, {dir / "c.bin", dir / "c.csv", true});
  CHECK(read_text(dir / "c.csv") == read_text(dir / "a.csv"));
  CHECK(read_file(dir / "c.bin") == read_file(dir / "a.bin"));

  const std::string log = read_text(dir / "a.csv");
  CHECK(log.rfind("step,loss,loss_xyz,loss_vis\n", 0) == 0);
  CHECK(std::count(log.begin(), log.end(), '\n') == 7);

  auto model = load_tracker(dir / "a.bin");
  CHECK(tracker_config_to_json(model->config()) == tracker_config_to_json(cfg.model));
  fs::remove_all(dir);
}
