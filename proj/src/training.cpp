#include "mvt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "mvt/checkpoint.hpp"
#include "mvt/errors.hpp"
#include "mvt/scenesim.hpp"

namespace mvt {

void LossConfig::validate() const {
  if (!(gamma > 0 && gamma <= 1)) throw ValidationError("loss config: gamma must be in (0, 1]");
  if (!(lambda_vis >= 0)) throw ValidationError("loss config: lambda_vis must be >= 0");
}

Tensor loss_xyz(const std::vector<XyzTerm>& terms, int iterations, double gamma) {
  if (!(gamma > 0 && gamma <= 1)) throw ValidationError("loss_xyz: gamma must be in (0, 1]");
  int64_t count = 0;
  for (const XyzTerm& t : terms) {
    const int64_t Q = t.pred.numel() / 3;
    if (t.pred.numel() != Q * 3 || static_cast<int64_t>(t.target.size()) != Q * 3 ||
        static_cast<int64_t>(t.mask.size()) != Q) {
      throw ShapeError("loss_xyz", "prediction " + shape_str(t.pred.shape()) + ", " + std::to_string(t.target.size()) +
                                       " targets, " + std::to_string(t.mask.size()) + " mask entries");
    }
    if (t.iteration < 1 || t.iteration > iterations) throw ShapeError("loss_xyz", "iteration outside [1, M]");
    for (uint8_t m : t.mask) count += m != 0;
  }
  Tensor total = Tensor::scalar(0);
  if (count == 0) return total;
  for (const XyzTerm& t : terms) {
    const Real w = static_cast<Real>(std::pow(gamma, iterations - t.iteration) / static_cast<double>(count));
    std::vector<Real> weight(t.target.size());
    for (size_t q = 0; q < t.mask.size(); ++q) std::fill_n(weight.begin() + q * 3, 3, t.mask[q] ? w : Real(0));
    total = add(total, weighted_l1(reshape(t.pred, {t.pred.numel()}), t.target, weight));
  }
  return total;
}

Tensor loss_vis(const std::vector<VisTerm>& terms) {
  int64_t n0 = 0, n1 = 0;
  for (const VisTerm& t : terms) {
    if (static_cast<size_t>(t.logits.numel()) != t.labels.size() || t.labels.size() != t.mask.size()) {
      throw ShapeError("loss_vis", std::to_string(t.logits.numel()) + " logits, " + std::to_string(t.labels.size()) +
                                       " labels, " + std::to_string(t.mask.size()) + " mask entries");
    }
    for (size_t i = 0; i < t.labels.size(); ++i) {
      if (!t.mask[i]) continue;
      (t.labels[i] > Real(0.5) ? n1 : n0) += 1;
    }
  }
  const int64_t n = n0 + n1;
  Tensor total = Tensor::scalar(0);
  if (n == 0) return total;
  const double w1 = n0 == 0 ? 1.0 : static_cast<double>(n) / (2.0 * static_cast<double>(n1 == 0 ? 1 : n1));
  const double w0 = n1 == 0 ? 1.0 : static_cast<double>(n) / (2.0 * static_cast<double>(n0 == 0 ? 1 : n0));
  for (const VisTerm& t : terms) {
    std::vector<Real> weight(t.labels.size(), 0);
    for (size_t i = 0; i < t.labels.size(); ++i) {
      if (t.mask[i]) weight[i] = static_cast<Real>((t.labels[i] > Real(0.5) ? w1 : w0) / static_cast<double>(n));
    }
    total = add(total, weighted_bce_with_logits(reshape(t.logits, {t.logits.numel()}), t.labels, weight));
  }
  return total;
}

void add_depth_noise(DepthMap& depth, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0) return;
  std::normal_distribution<double> noise(0.0, sigma);
  for (float& v : depth.values) {
    if (std::isfinite(v) && v > 0) v = static_cast<float>(v + noise(rng));
  }
}

std::unique_ptr<Sample> augment_sample(const SceneData& scene, std::mt19937_64& rng, const AugmentConfig& config) {
  const int V = scene.num_views();
  if (V < 1) throw ValidationError("augment_sample: scene " + scene.manifest.scene_id + " has no views");
  auto s = std::make_unique<Sample>();

  std::vector<int> order(V);
  for (int v = 0; v < V; ++v) order[v] = v;
  int keep = V;
  if (config.view_drop) {
    const int lo = std::clamp(config.min_views, 1, V);
    keep = std::uniform_int_distribution<int>(lo, V)(rng);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(keep);
  }
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return scene.cameras[a].view_id < scene.cameras[b].view_id; });

  if (config.similarity_jitter) {
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double angle = std::numbers::pi * unit(rng);
    s->world.rotation = Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
    s->world.translation = config.jitter_translation * Vec3(unit(rng), unit(rng), unit(rng));
    s->world.scale = 1.0 + config.jitter_scale * unit(rng);
  }

  const int F = scene.num_frames();
  s->clip.num_frames = F;
  s->depth.resize(keep);
  for (int i = 0; i < keep; ++i) {
    const int v = order[i];
    s->view_ids.push_back(scene.cameras[v].view_id);
    s->depth[i] = scene.depth[v];
    for (DepthMap& d : s->depth[i]) {
      if (s->world.scale != 1.0) {
        for (float& x : d.values) x = static_cast<float>(x * s->world.scale);
      }
      add_depth_noise(d, config.depth_noise, rng);
    }
  }
  for (int i = 0; i < keep; ++i) {
    const int v = order[i];
    ClipView view;
    for (int t = 0; t < F; ++t) {
      view.cameras.push_back(apply_similarity(scene.cameras[v].at(t), s->world));
      view.rgb.push_back(&scene.rgb[v][t]);
      view.depth.push_back(&s->depth[i][t]);
    }
    s->clip.views.push_back(std::move(view));
  }

  std::map<int, const TrackRecord*> gt_by_id;
  for (const TrackRecord& r : scene.ground_truth) gt_by_id[r.track_id] = &r;
  std::vector<int> tracks(scene.queries.size());
  for (size_t i = 0; i < tracks.size(); ++i) tracks[i] = static_cast<int>(i);
  if (config.max_tracks > 0 && static_cast<int>(tracks.size()) > config.max_tracks) {
    std::shuffle(tracks.begin(), tracks.end(), rng);
    tracks.resize(config.max_tracks);
    std::sort(tracks.begin(), tracks.end());
  }
  for (int i : tracks) {
    Query q = scene.queries[i];
    q.xyz = s->world.apply(q.xyz);
    s->queries.push_back(q);
    const auto it = gt_by_id.find(q.track_id);
    if (it == gt_by_id.end()) {
      throw ValidationError("augment_sample: scene " + scene.manifest.scene_id + " has no ground truth for track " +
                            std::to_string(q.track_id));
    }
    TrackRecord r = *it->second;
    for (Vec3& p : r.positions) p = s->world.apply(p);
    s->ground_truth.push_back(std::move(r));
  }
  return s;
}

void TrainingConfig::validate() const {
  model.validate();
  loss.validate();
  if (steps < 0 || warmup_steps < 0) throw ValidationError("training config: step counts must be >= 0");
  if (!(optimizer.lr > 0)) throw ValidationError("training config: lr must be positive");
  if (augment.min_views < 1) throw ValidationError("training config: min_views must be >= 1");
  if (augment.depth_noise < 0) throw ValidationError("training config: depth_noise must be >= 0");
  if (threads < 1) throw ValidationError("training config: threads must be >= 1");
}

nlohmann::json training_config_to_json(const TrainingConfig& c) {
  return {
      {"model", tracker_config_to_json(c.model)},
      {"loss", {{"lambda_vis", c.loss.lambda_vis}, {"gamma", c.loss.gamma}}},
      {"augment",
       {{"view_drop", c.augment.view_drop},
        {"min_views", c.augment.min_views},
        {"depth_noise", c.augment.depth_noise},
        {"similarity_jitter", c.augment.similarity_jitter},
        {"jitter_translation", c.augment.jitter_translation},
        {"jitter_scale", c.augment.jitter_scale},
        {"max_tracks", c.augment.max_tracks}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay}}},
      {"steps", c.steps},
      {"warmup_steps", c.warmup_steps},
      {"min_lr_ratio", c.min_lr_ratio},
      {"grad_clip", c.grad_clip},
      {"log_every", c.log_every},
      {"checkpoint_every", c.checkpoint_every},
      {"seed", c.seed},
      {"threads", c.threads},
  };
}

TrainingConfig training_config_from_json(const nlohmann::json& j) {
  TrainingConfig c;
  try {
    if (j.contains("model")) c.model = tracker_config_from_json(j.at("model"));
    const nlohmann::json empty = nlohmann::json::object();
    const auto& l = j.contains("loss") ? j.at("loss") : empty;
    c.loss.lambda_vis = l.value("lambda_vis", c.loss.lambda_vis);
    c.loss.gamma = l.value("gamma", c.loss.gamma);
    const auto& a = j.contains("augment") ? j.at("augment") : empty;
    c.augment.view_drop = a.value("view_drop", c.augment.view_drop);
    c.augment.min_views = a.value("min_views", c.augment.min_views);
    c.augment.depth_noise = a.value("depth_noise", c.augment.depth_noise);
    c.augment.similarity_jitter = a.value("similarity_jitter", c.augment.similarity_jitter);
    c.augment.jitter_translation = a.value("jitter_translation", c.augment.jitter_translation);
    c.augment.jitter_scale = a.value("jitter_scale", c.augment.jitter_scale);
    c.augment.max_tracks = a.value("max_tracks", c.augment.max_tracks);
    const auto& o = j.contains("optimizer") ? j.at("optimizer") : empty;
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
    c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    c.steps = j.value("steps", c.steps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.min_lr_ratio = j.value("min_lr_ratio", c.min_lr_ratio);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

double learning_rate(const TrainingConfig& c, int64_t step) {
  const double base = c.optimizer.lr;
  if (step < c.warmup_steps) return base * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const int64_t span = std::max<int64_t>(1, c.steps - c.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / static_cast<double>(span));
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return base * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * cosine);
}

SampleLoss sample_loss(const TrackerModel& model, const Sample& sample, const TrainingConfig& config) {
  const TrackerConfig& mc = model.config();
  const EncodedClip clip = encode_clip(model, sample.clip, config.threads);
  const TrackingResult res = run_windowed(model, clip, sample.queries, mc.window, mc.iterations);

  std::vector<XyzTerm> xyz;
  std::vector<VisTerm> vis;
  for (size_t w = 0; w < res.finals.size(); ++w) {
    const WindowState& s = res.finals[w];
    const int N = s.num_tracks(), T = s.length;
    std::vector<Real> target(static_cast<size_t>(N) * T * 3);
    std::vector<Real> labels(static_cast<size_t>(N) * T);
    for (int n = 0; n < N; ++n) {
      const TrackRecord& gt = sample.ground_truth[s.tracks[n]];
      for (int t = 0; t < T; ++t) {
        const size_t q = static_cast<size_t>(n) * T + t;
        const Vec3 rel = gt.positions[s.start + t] - s.query_xyz[n];
        for (int a = 0; a < 3; ++a) target[q * 3 + a] = static_cast<Real>(rel[a]);
        labels[q] = gt.visible[s.start + t] ? Real(1) : Real(0);
      }
    }
    for (size_t m = 0; m < res.traces[w].disp.size(); ++m) {
      xyz.push_back({res.traces[w].disp[m], target, s.active, static_cast<int>(m) + 1});
    }
    vis.push_back({s.vis, std::move(labels), s.active});
  }
  SampleLoss out;
  out.xyz = loss_xyz(xyz, mc.iterations, config.loss.gamma);
  out.vis = loss_vis(vis);
  out.total = add(out.xyz, scale(out.vis, static_cast<Real>(config.loss.lambda_vis)));
  return out;
}

StepLosses unrolled_train_step(TrackerModel& model, const Sample& sample, OptimState& optim,
                               const TrainingConfig& config) {
  const int64_t step = optim.step;
  optim.config = config.optimizer;
  optim.config.lr = static_cast<Real>(learning_rate(config, step));
  auto params = model.params().items();
  model.params().zero_grad();

  SampleLoss sl = sample_loss(model, sample, config);
  StepLosses out;
  out.loss = sl.total.item();
  out.loss_xyz = sl.xyz.item();
  out.loss_vis = sl.vis.item();
  if (!std::isfinite(out.loss)) {
    throw NumericDivergence("training step " + std::to_string(step) + ": non-finite loss");
  }
  sl.total.backward();
  for (auto& p : params) p.tensor.mutable_grad();  // unreached parameters get zero gradients
  out.grad_norm = clip_grad_norm(params, config.grad_clip > 0 ? config.grad_clip : 0.0);
  if (!std::isfinite(out.grad_norm)) {
    throw NumericDivergence("training step " + std::to_string(step) + ": non-finite gradient");
  }
  optimizer_step(params, optim);
  return out;
}

void save_training_checkpoint(const TrackerModel& model, const OptimState& optim, const fs::path& path) {
  auto arrays = snapshot(model.params().items());
  auto extra = snapshot_optimizer(model.params().items(), optim);
  arrays.insert(arrays.end(), extra.begin(), extra.end());
  write_checkpoint(path, arrays);
}

void load_training_checkpoint(TrackerModel& model, OptimState& optim, const fs::path& path) {
  const auto arrays = read_checkpoint(path);
  restore(model.params().items(), arrays);
  restore_optimizer(model.params().items(), arrays, optim);
}

void train(const TrainingConfig& config, const std::vector<SceneData>& scenes, const TrainRun& run,
           const std::function<void(int64_t, const StepLosses&)>& on_step) {
  config.validate();
  if (scenes.empty()) throw ValidationError("train: no scenes");
  TrackerModel model(config.model, config.seed);
  OptimState optim;
  optim.config = config.optimizer;

  std::vector<std::string> log_rows;
  if (run.resume && fs::exists(run.checkpoint)) {
    load_training_checkpoint(model, optim, run.checkpoint);
    if (fs::exists(run.log_csv)) {
      std::ifstream in(run.log_csv);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (!line.empty() && std::stoll(line.substr(0, line.find(','))) < optim.step) log_rows.push_back(line);
      }
    }
  }
  const nlohmann::json sidecar = training_config_to_json(config);
  write_file(fs::path(run.checkpoint.string() + ".json"), sidecar.dump(2) + "\n");

  std::ofstream log(run.log_csv, std::ios::trunc);
  if (!log) throw IoError("cannot write " + run.log_csv.string());
  log << "step,loss,loss_xyz,loss_vis\n";
  for (const auto& r : log_rows) log << r << "\n";
  log.flush();

  const int64_t end = run.stop_after >= 0 ? std::min<int64_t>(run.stop_after, config.steps) : config.steps;
  for (int64_t k = optim.step; k < end; ++k) {
    std::mt19937_64 rng(derive_seed(config.seed, static_cast<uint64_t>(k), 0x7472));
    const SceneData& scene = scenes[rng() % scenes.size()];
    const auto sample = augment_sample(scene, rng, config.augment);
    const StepLosses l = unrolled_train_step(model, *sample, optim, config);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g", static_cast<long long>(k), l.loss, l.loss_xyz, l.loss_vis);
    log << buf << "\n";
    log.flush();
    if (on_step) on_step(k, l);
    const bool last = k + 1 == end;
    if (last || (config.checkpoint_every > 0 && (k + 1) % config.checkpoint_every == 0)) {
      save_training_checkpoint(model, optim, run.checkpoint);
    }
  }
  if (config.steps == 0 || optim.step == 0) save_training_checkpoint(model, optim, run.checkpoint);
}

}  // namespace mvt
