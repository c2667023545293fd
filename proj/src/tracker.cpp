#include "mvt/tracker.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mvt/checkpoint.hpp"
#include "mvt/errors.hpp"
#include "mvt/parallel.hpp"

namespace mvt {

int TrackerConfig::token_length() const {
  return 6 * num_freqs + feature_dim() + correlation_length(correlation, levels()) + 1;
}

void TrackerConfig::validate() const {
  if (width < 1 || heads < 1 || blocks < 0 || virtual_tracks < 1 || mlp_hidden < 1 || num_freqs < 1) {
    throw ValidationError("tracker config: widths, heads, virtual tracks and frequencies must be positive");
  }
  if (window < 2 || window % 2 != 0) throw ValidationError("tracker config: window must be even and >= 2");
  if (iterations < 1) throw ValidationError("tracker config: iterations must be >= 1");
  if (correlation.neighbors < 1) throw ValidationError("tracker config: neighbors must be >= 1");
  if (!(delta_scale > 0) || !(displacement_scale > 0) || !(correlation.offset_scale > 0)) {
    throw ValidationError("tracker config: scales must be positive");
  }
}

nlohmann::json tracker_config_to_json(const TrackerConfig& c) {
  return {
      {"feature_dim", c.encoder.feature_dim},
      {"stem_width", c.encoder.stem_width},
      {"stage_width", c.encoder.stage_width},
      {"residual_blocks", c.encoder.residual_blocks},
      {"levels", c.encoder.levels},
      {"neighbors", c.correlation.neighbors},
      {"encoding", encoding_name(c.correlation.encoding)},
      {"offset_scale", c.correlation.offset_scale},
      {"similarity_scale", c.correlation.similarity_scale},
      {"width", c.width},
      {"heads", c.heads},
      {"blocks", c.blocks},
      {"virtual_tracks", c.virtual_tracks},
      {"mlp_hidden", c.mlp_hidden},
      {"num_freqs", c.num_freqs},
      {"window", c.window},
      {"iterations", c.iterations},
      {"displacement_scale", c.displacement_scale},
      {"delta_scale", c.delta_scale},
      {"detach_positions", c.detach_positions},
  };
}

TrackerConfig tracker_config_from_json(const nlohmann::json& j) {
  TrackerConfig c;
  try {
    c.encoder.feature_dim = j.value("feature_dim", c.encoder.feature_dim);
    c.encoder.stem_width = j.value("stem_width", c.encoder.stem_width);
    c.encoder.stage_width = j.value("stage_width", c.encoder.stage_width);
    c.encoder.residual_blocks = j.value("residual_blocks", c.encoder.residual_blocks);
    c.encoder.levels = j.value("levels", c.encoder.levels);
    c.correlation.neighbors = j.value("neighbors", c.correlation.neighbors);
    c.correlation.encoding =
        parse_encoding(j.value("encoding", std::string(encoding_name(c.correlation.encoding))));
    c.correlation.offset_scale = j.value("offset_scale", c.correlation.offset_scale);
    c.correlation.similarity_scale = j.value("similarity_scale", c.correlation.similarity_scale);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.blocks = j.value("blocks", c.blocks);
    c.virtual_tracks = j.value("virtual_tracks", c.virtual_tracks);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.num_freqs = j.value("num_freqs", c.num_freqs);
    c.window = j.value("window", c.window);
    c.iterations = j.value("iterations", c.iterations);
    c.displacement_scale = j.value("displacement_scale", c.displacement_scale);
    c.delta_scale = j.value("delta_scale", c.delta_scale);
    c.detach_positions = j.value("detach_positions", c.detach_positions);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("tracker config: ") + e.what());
  }
  c.validate();
  return c;
}

TrackerModel::TrackerModel(const TrackerConfig& config, uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int W = config_.width, d = config_.feature_dim();
  encoder_ = Encoder(params_, "encoder", config_.encoder, rng);
  input_ = Linear(params_, "refiner.input", config_.token_length(), W, rng);
  virtual_tokens_ =
      params_.add("refiner.virtual", xavier_uniform({config_.virtual_tracks, W}, config_.virtual_tracks, W, rng));
  for (int i = 0; i < config_.blocks; ++i) {
    const std::string p = "refiner.block" + std::to_string(i);
    Block b;
    b.time_norm = LayerNorm(params_, p + ".time_norm", W);
    b.time_attn = Attention(params_, p + ".time_attn", W, config_.heads, rng);
    b.time_mlp_norm = LayerNorm(params_, p + ".time_mlp_norm", W);
    b.time_mlp = Mlp(params_, p + ".time_mlp", W, config_.mlp_hidden, rng);
    b.virt_query_norm = LayerNorm(params_, p + ".virt_query_norm", W);
    b.real_key_norm = LayerNorm(params_, p + ".real_key_norm", W);
    b.virt_from_real = Attention(params_, p + ".virt_from_real", W, config_.heads, rng);
    b.virt_mlp_norm = LayerNorm(params_, p + ".virt_mlp_norm", W);
    b.virt_mlp = Mlp(params_, p + ".virt_mlp", W, config_.mlp_hidden, rng);
    b.real_query_norm = LayerNorm(params_, p + ".real_query_norm", W);
    b.virt_key_norm = LayerNorm(params_, p + ".virt_key_norm", W);
    b.real_from_virt = Attention(params_, p + ".real_from_virt", W, config_.heads, rng);
    b.real_mlp_norm = LayerNorm(params_, p + ".real_mlp_norm", W);
    b.real_mlp = Mlp(params_, p + ".real_mlp", W, config_.mlp_hidden, rng);
    blocks_.push_back(std::move(b));
  }
  out_norm_ = LayerNorm(params_, "refiner.out_norm", W);
  delta_pos_ = Linear(params_, "refiner.delta_pos", W, 3, rng, true, true);
  delta_feat_ = Linear(params_, "refiner.delta_feat", W, d, rng, true, true);
  visibility_ = Linear(params_, "visibility", d, 1, rng);
}

namespace {

// Standard transformer position code for frame index t within a window.
Tensor time_embedding(int frames, int width) {
  std::vector<Real> data(static_cast<size_t>(frames) * width);
  for (int t = 0; t < frames; ++t) {
    for (int i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / width);
      const double a = t * rate;
      data[static_cast<size_t>(t) * width + i] = static_cast<Real>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return Tensor::from({static_cast<int64_t>(frames) * width}, std::move(data));
}

bool all_finite(const Tensor& t) {
  for (Real v : t.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

RefinerOutput TrackerModel::refine(const Tensor& tokens, int N, int T, const std::vector<uint8_t>& active) const {
  const int W = config_.width, V = config_.virtual_tracks;
  if (tokens.rank() != 2 || tokens.dim(0) != static_cast<int64_t>(N) * T || tokens.dim(1) != config_.token_length()) {
    throw ShapeError("refine", "tokens " + shape_str(tokens.shape()) + " for " + std::to_string(N) + " tracks x " +
                                   std::to_string(T) + " frames");
  }
  if (active.size() != static_cast<size_t>(N) * T) throw ShapeError("refine", "active mask size");
  const Tensor temb = time_embedding(T, W);

  Tensor real = reshape(add_bias(reshape(input_(tokens), {N, static_cast<int64_t>(T) * W}), temb), {N, T, W});
  std::vector<int64_t> vrows(static_cast<size_t>(V) * T);
  for (int v = 0; v < V; ++v) std::fill(vrows.begin() + v * T, vrows.begin() + (v + 1) * T, v);
  Tensor virt = reshape(add_bias(reshape(gather_rows(virtual_tokens_, vrows), {V, static_cast<int64_t>(T) * W}), temb),
                        {V, T, W});
  Tensor h = concat({real, virt}, 0);  // [N + V, T, W]

  std::vector<uint8_t> time_mask(static_cast<size_t>(N + V) * T, 1);
  std::copy(active.begin(), active.end(), time_mask.begin());
  std::vector<uint8_t> space_mask(static_cast<size_t>(T) * N);  // [T][N]
  for (int n = 0; n < N; ++n) {
    for (int t = 0; t < T; ++t) space_mask[static_cast<size_t>(t) * N + n] = active[static_cast<size_t>(n) * T + t];
  }

  for (const Block& b : blocks_) {
    Tensor a = b.time_norm(h);
    h = add(h, b.time_attn(a, a, time_mask));
    h = add(h, b.time_mlp(b.time_mlp_norm(h)));

    Tensor s = permute(h, {1, 0, 2});  // [T, N + V, W]
    Tensor xr = slice(s, 1, 0, N);
    Tensor xv = slice(s, 1, N, V);
    xv = add(xv, b.virt_from_real(b.virt_query_norm(xv), b.real_key_norm(xr), space_mask));
    xv = add(xv, b.virt_mlp(b.virt_mlp_norm(xv)));
    xr = add(xr, b.real_from_virt(b.real_query_norm(xr), b.virt_key_norm(xv)));
    xr = add(xr, b.real_mlp(b.real_mlp_norm(xr)));
    h = permute(concat({xr, xv}, 1), {1, 0, 2});
  }
  Tensor out = out_norm_(reshape(slice(h, 0, 0, N), {static_cast<int64_t>(N) * T, W}));
  return {delta_pos_(out), delta_feat_(out)};
}

Tensor TrackerModel::visibility_logits(const Tensor& feat) const {
  return reshape(visibility_(feat), {feat.dim(0)});
}

void save_model(const TrackerModel& model, const fs::path& path) {
  write_checkpoint(path, snapshot(model.params().items()));
  write_file(fs::path(path.string() + ".json"), tracker_config_to_json(model.config()).dump(2) + "\n");
}

void load_model(TrackerModel& model, const fs::path& path) { restore(model.params().items(), read_checkpoint(path)); }

std::unique_ptr<TrackerModel> load_tracker(const fs::path& path) {
  const fs::path sidecar(path.string() + ".json");
  const auto bytes = read_file(sidecar);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(sidecar.string() + ": " + e.what());
  }
  auto model = std::make_unique<TrackerModel>(tracker_config_from_json(j.contains("model") ? j.at("model") : j));
  load_model(*model, path);
  return model;
}

Clip make_clip(const SceneData& scene, const std::vector<int>& view_ids) {
  Clip clip;
  clip.num_frames = scene.num_frames();
  std::vector<int> chosen;
  for (int v = 0; v < scene.num_views(); ++v) {
    const int id = scene.cameras[v].view_id;
    if (view_ids.empty() || std::find(view_ids.begin(), view_ids.end(), id) != view_ids.end()) chosen.push_back(v);
  }
  for (int id : view_ids) {
    bool found = false;
    for (const auto& c : scene.cameras) found = found || c.view_id == id;
    if (!found) throw ValidationError("view " + std::to_string(id) + " is not in scene " + scene.manifest.scene_id);
  }
  if (chosen.empty()) throw ValidationError("no views selected");
  std::sort(chosen.begin(), chosen.end(),
            [&](int a, int b) { return scene.cameras[a].view_id < scene.cameras[b].view_id; });
  if (scene.rgb.size() != scene.cameras.size() || scene.depth.size() != scene.cameras.size()) {
    throw ValidationError("scene " + scene.manifest.scene_id + " was loaded without images or depth");
  }
  for (int v : chosen) {
    ClipView view;
    for (int t = 0; t < clip.num_frames; ++t) {
      view.cameras.push_back(scene.cameras[v].at(t));
      view.rgb.push_back(&scene.rgb[v][t]);
      view.depth.push_back(&scene.depth[v][t]);
    }
    clip.views.push_back(std::move(view));
  }
  return clip;
}

EncodedClip encode_clip(const TrackerModel& model, const Clip& clip, int threads) {
  if (clip.views.empty() || clip.num_frames < 1) throw ValidationError("encode_clip: empty clip");
  EncodedClip out;
  out.num_frames = clip.num_frames;
  out.num_views = static_cast<int>(clip.views.size());
  std::vector<const RgbImage*> images;
  for (int t = 0; t < clip.num_frames; ++t) {
    for (const auto& v : clip.views) images.push_back(v.rgb[t]);
  }
  const Tensor base = model.encoder().encode_frames(images);
  out.bank = make_feature_bank(build_pyramid(base, model.config().levels()));
  out.clouds.resize(clip.num_frames);
  parallel_for(clip.num_frames, threads, [&](int t) {
    std::vector<const DepthMap*> depths;
    std::vector<Camera> cams;
    for (const auto& v : clip.views) {
      depths.push_back(v.depth[t]);
      cams.push_back(v.cameras[t]);
    }
    out.clouds[t] = fuse_views(depths, cams, out.bank, t * out.num_views, t);
  });
  return out;
}

Tensor build_tokens(const TrackerModel& model, const WindowState& state, const EncodedClip& clip) {
  const TrackerConfig& cfg = model.config();
  const int N = state.num_tracks(), T = state.length;
  const int64_t Q = static_cast<int64_t>(N) * T;
  if (state.start < 0 || state.start + T > clip.num_frames) throw ValidationError("build_tokens: window outside clip");
  const Tensor disp = cfg.detach_positions ? state.disp.detach() : state.disp;

  std::vector<Vec3> positions(static_cast<size_t>(Q)), origins(static_cast<size_t>(Q));
  auto dv = state.disp.data();
  for (int n = 0; n < N; ++n) {
    for (int t = 0; t < T; ++t) {
      const int64_t q = static_cast<int64_t>(n) * T + t;
      origins[q] = state.query_xyz[n];
      positions[q] = origins[q] + Vec3(dv[q * 3], dv[q * 3 + 1], dv[q * 3 + 2]);
    }
  }
  std::vector<Tensor> parts;
  parts.push_back(sinusoidal(scale(disp, static_cast<Real>(cfg.displacement_scale)), cfg.num_freqs));
  parts.push_back(state.feat);
  for (int s = 0; s < cfg.levels(); ++s) {
    std::vector<const FusedPointCloud*> clouds(static_cast<size_t>(Q));
    for (int64_t q = 0; q < Q; ++q) clouds[q] = clip.clouds[state.start + q % T][s].get();
    const NeighborTable table = find_neighbors(positions, origins, clouds, cfg.correlation.neighbors);
    parts.push_back(correlation_features(state.feat, disp, clip.bank.levels[s], table, cfg.correlation));
  }
  parts.push_back(reshape(state.vis, {Q, 1}));
  return concat(parts, 1);
}

WindowState refine_window(const TrackerModel& model, const WindowState& initial, const EncodedClip& clip,
                          int iterations, WindowTrace* trace) {
  if (iterations < 1) throw ValidationError("refine_window: iterations must be >= 1");
  const TrackerConfig& cfg = model.config();
  const int N = initial.num_tracks(), T = initial.length, d = cfg.feature_dim();
  const int64_t Q = static_cast<int64_t>(N) * T;

  // Position updates skip inactive frames and the query frame (pinning);
  // feature updates skip inactive frames only.
  std::vector<Real> pos_mask(static_cast<size_t>(Q) * 3), feat_mask(static_cast<size_t>(Q) * d);
  for (int n = 0; n < N; ++n) {
    for (int t = 0; t < T; ++t) {
      const int64_t q = static_cast<int64_t>(n) * T + t;
      const bool act = initial.active[q] != 0;
      const bool pinned = initial.start + t == initial.query_frame[n];
      std::fill_n(pos_mask.begin() + q * 3, 3, act && !pinned ? Real(1) : Real(0));
      std::fill_n(feat_mask.begin() + q * d, d, act ? Real(1) : Real(0));
    }
  }
  const Tensor pmask = Tensor::from({Q, 3}, std::move(pos_mask));
  const Tensor fmask = Tensor::from({Q, d}, std::move(feat_mask));

  WindowState state = initial;
  for (int m = 1; m <= iterations; ++m) {
    const RefinerOutput out = model.refine(build_tokens(model, state, clip), N, T, state.active);
    if (!all_finite(out.delta_pos) || !all_finite(out.delta_feat)) {
      throw NumericDivergence("refine_window: non-finite update at iteration " + std::to_string(m));
    }
    state.disp = add(state.disp, mul(scale(out.delta_pos, static_cast<Real>(cfg.delta_scale)), pmask));
    state.feat = add(state.feat, mul(out.delta_feat, fmask));
    if (trace) trace->disp.push_back(state.disp);
  }
  state.vis = model.visibility_logits(state.feat);
  if (!all_finite(state.vis)) {
    throw NumericDivergence("refine_window: non-finite visibility at iteration " + std::to_string(iterations));
  }
  return state;
}

std::vector<std::pair<int, int>> window_spans(int frames, int window) {
  if (frames < 1) throw ValidationError("window_spans: video must have at least one frame");
  if (window < 2 || window % 2 != 0) throw ValidationError("window_spans: window must be even and >= 2");
  if (frames <= window) return {{0, frames}};
  const int stride = window / 2;
  const int J = (frames - window + stride - 1) / stride + 1;
  std::vector<std::pair<int, int>> spans;
  for (int j = 0; j < J; ++j) {
    const int start = j * stride;
    spans.emplace_back(start, std::min(window, frames - start));
  }
  return spans;
}

TrackingResult run_windowed(const TrackerModel& model, const EncodedClip& clip, const std::vector<Query>& queries,
                            int window, int iterations) {
  const int L = clip.num_frames;
  std::string bad;
  for (const Query& q : queries) {
    if (q.query_frame < 0 || q.query_frame >= L) {
      bad += "\n  track " + std::to_string(q.track_id) + ": query frame " + std::to_string(q.query_frame) +
             " outside [0, " + std::to_string(L) + ")";
    }
  }
  if (!bad.empty()) throw ValidationError("invalid queries:" + bad);

  TrackingResult result;
  result.windows = window_spans(L, window);
  const int Nq = static_cast<int>(queries.size());

  std::vector<int64_t> anchor_rows(static_cast<size_t>(Nq));
  for (int i = 0; i < Nq; ++i) {
    anchor_rows[i] = init_track_feature(*clip.clouds[queries[i].query_frame][0], queries[i].xyz).feature_row;
  }
  const Tensor init_feat = Nq > 0 ? gather_rows(clip.bank.levels[0], anchor_rows) : Tensor();

  // Which window last held each (query, frame), and at which row.
  std::vector<int> owner(static_cast<size_t>(Nq) * L, -1);
  std::vector<int64_t> owner_row(static_cast<size_t>(Nq) * L, -1);

  result.finals.reserve(result.windows.size());
  const WindowState* prev = nullptr;
  std::vector<int> prev_slot(static_cast<size_t>(Nq), -1);
  for (const auto& [start, length] : result.windows) {
    WindowState s;
    s.start = start;
    s.length = length;
    for (int i = 0; i < Nq; ++i) {
      if (queries[i].query_frame < start + length) {
        s.tracks.push_back(i);
        s.query_frame.push_back(queries[i].query_frame);
        s.query_xyz.push_back(queries[i].xyz);
      }
    }
    const int N = s.num_tracks();
    if (N == 0) continue;
    const int64_t Q = static_cast<int64_t>(N) * length;
    std::vector<int64_t> prev_rows(static_cast<size_t>(Q), -1);
    std::vector<int64_t> feat_rows(static_cast<size_t>(Q));
    const int64_t prev_count = prev ? static_cast<int64_t>(prev->num_tracks()) * prev->length : 0;
    s.active.resize(static_cast<size_t>(Q));
    for (int n = 0; n < N; ++n) {
      const int i = s.tracks[n];
      for (int t = 0; t < length; ++t) {
        const int64_t q = static_cast<int64_t>(n) * length + t;
        const int g = start + t;
        s.active[q] = g >= queries[i].query_frame;
        if (prev && prev_slot[i] >= 0) {
          const int pt = std::min(g, prev->start + prev->length - 1) - prev->start;
          prev_rows[q] = static_cast<int64_t>(prev_slot[i]) * prev->length + pt;
          feat_rows[q] = prev_rows[q];
        } else {
          feat_rows[q] = prev_count + i;
        }
      }
    }
    if (prev) {
      s.disp = gather_rows(prev->disp, prev_rows);
      s.feat = gather_rows(concat({prev->feat, init_feat}, 0), feat_rows);
      s.vis = reshape(gather_rows(reshape(prev->vis, {prev_count, 1}), prev_rows), {Q});
    } else {
      s.disp = Tensor::zeros({Q, 3});
      s.feat = gather_rows(init_feat, feat_rows);
      s.vis = Tensor::zeros({Q});
    }

    WindowTrace trace;
    result.finals.push_back(refine_window(model, s, clip, iterations, &trace));
    result.traces.push_back(std::move(trace));
    prev = &result.finals.back();
    std::fill(prev_slot.begin(), prev_slot.end(), -1);
    const int w = static_cast<int>(result.finals.size()) - 1;
    for (int n = 0; n < N; ++n) {
      prev_slot[s.tracks[n]] = n;
      for (int t = 0; t < length; ++t) {
        owner[static_cast<size_t>(s.tracks[n]) * L + start + t] = w;
        owner_row[static_cast<size_t>(s.tracks[n]) * L + start + t] = static_cast<int64_t>(n) * length + t;
      }
    }
  }

  result.logits.assign(static_cast<size_t>(Nq) * L, 0.0);
  for (int i = 0; i < Nq; ++i) {
    TrackRecord rec;
    rec.track_id = queries[i].track_id;
    rec.query_frame = queries[i].query_frame;
    for (int g = 0; g < L; ++g) {
      Vec3 p = queries[i].xyz;
      double logit = 0;
      bool live = false;
      const int w = owner[static_cast<size_t>(i) * L + g];
      if (w >= 0 && g >= queries[i].query_frame) {
        const int64_t row = owner_row[static_cast<size_t>(i) * L + g];
        auto dv = result.finals[w].disp.data();
        p += Vec3(dv[row * 3], dv[row * 3 + 1], dv[row * 3 + 2]);
        logit = result.finals[w].vis.data()[row];
        live = true;
      }
      result.logits[static_cast<size_t>(i) * L + g] = logit;
      rec.positions.push_back(p);
      const double conf = live ? 1.0 / (1.0 + std::exp(-logit)) : 0.0;
      rec.confidence.push_back(conf);
      rec.visible.push_back(live && conf >= 0.5);
    }
    result.tracks.push_back(std::move(rec));
  }
  return result;
}

std::vector<uint8_t> predict_visibility(std::span<const double> logits, double threshold) {
  std::vector<uint8_t> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-logits[i])) >= threshold;
  return out;
}

}  // namespace mvt
