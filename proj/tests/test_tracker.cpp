#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "mvt/errors.hpp"
#include "mvt/pipeline.hpp"
#include "mvt/tracker.hpp"

using namespace mvt;
using namespace mvt::testing;

namespace {

const SceneData& scene6() {
  static const std::vector<SceneData> scenes = simulate(tiny_sim(21, 6), "tracker6");
  return scenes[0];
}

const SceneData& scene10() {
  static const std::vector<SceneData> scenes = simulate(tiny_sim(22, 10), "tracker10");
  return scenes[0];
}

std::vector<Real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("token length follows the documented formula") {
  TrackerConfig c = tiny_tracker();
  CHECK(c.token_length() == 6 * c.num_freqs + c.feature_dim() + c.levels() * c.correlation.neighbors * 4 + 1);
  c.num_freqs = 10;
  c.encoder.feature_dim = 128;
  c.encoder.levels = 4;
  c.correlation.neighbors = 16;
  CHECK(c.token_length() == 60 + 128 + 256 + 1);
}

TEST_CASE("tokens at the query frame start with the zero-displacement code") {
  NoGradGuard guard;
  TrackerModel model(tiny_tracker(6), 1);
  const EncodedClip clip = encode_clip(model, make_clip(scene6()));
  const WindowState s = first_window(clip, scene6().queries, 6);
  const Tensor tokens = build_tokens(model, s, clip);
  const int F = model.config().num_freqs, L = model.config().token_length();
  REQUIRE(tokens.dim(1) == L);
  for (int n = 0; n < s.num_tracks(); ++n) {
    const int64_t q = static_cast<int64_t>(n) * s.length + s.query_frame[n];
    for (int c = 0; c < 3; ++c) {
      for (int j = 0; j < F; ++j) {
        CHECK(tokens.data()[q * L + c * 2 * F + 2 * j] == 0.0f);
        CHECK(tokens.data()[q * L + c * 2 * F + 2 * j + 1] == 1.0f);
      }
    }
  }
  for (Real v : tokens.data()) REQUIRE(std::isfinite(v));
  CHECK(values(build_tokens(model, s, clip)) == values(tokens));
}

TEST_CASE("one iteration with zero output heads only sets visibility") {
  NoGradGuard guard;
  TrackerModel model(tiny_tracker(6), 2);
  const EncodedClip clip = encode_clip(model, make_clip(scene6()));
  const WindowState s = first_window(clip, scene6().queries, 6);
  const WindowState out = refine_window(model, s, clip, 1);
  CHECK(values(out.disp) == values(s.disp));
  CHECK(values(out.feat) == values(s.feat));
  CHECK(values(out.vis) == values(model.visibility_logits(s.feat)));
}

TEST_CASE("query frame stays pinned and inactive frames are never read") {
  NoGradGuard guard;
  TrackerModel model(tiny_tracker(10, 3), 3);
  randomize_heads(model, 3);
  std::vector<Query> queries = scene10().queries;
  for (size_t i = 0; i < queries.size(); ++i) queries[i].query_frame = static_cast<int>(i % 5);
  // Positions must come from the GT at the new query frame for the pin to be meaningful.
  for (auto& q : queries) {
    for (const auto& g : scene10().ground_truth) {
      if (g.track_id == q.track_id) q.xyz = g.positions[q.query_frame];
    }
  }
  const EncodedClip clip = encode_clip(model, make_clip(scene10()));
  const WindowState s = first_window(clip, queries, 10);
  const WindowState out = refine_window(model, s, clip, 3);

  double moved = 0;
  for (int n = 0; n < out.num_tracks(); ++n) {
    for (int t = 0; t < out.length; ++t) {
      const int64_t q = static_cast<int64_t>(n) * out.length + t;
      for (int c = 0; c < 3; ++c) {
        const Real d = out.disp.data()[q * 3 + c];
        if (t == s.query_frame[n] || !s.active[q]) {
          CHECK(d == 0.0f);
        } else {
          moved += std::abs(d);
        }
      }
    }
  }
  CHECK(moved > 0);

  // Scribble over inactive rows; active rows must come out bit-identical.
  WindowState poked = s;
  std::vector<Real> disp = values(s.disp), feat = values(s.feat), vis = values(s.vis);
  const int d = model.config().feature_dim();
  for (size_t q = 0; q < s.active.size(); ++q) {
    if (s.active[q]) continue;
    for (int c = 0; c < 3; ++c) disp[q * 3 + c] = 0.5f + static_cast<Real>(c);
    for (int k = 0; k < d; ++k) feat[q * d + k] = -3.0f;
    vis[q] = 7.0f;
  }
  poked.disp = Tensor::from(s.disp.shape(), disp);
  poked.feat = Tensor::from(s.feat.shape(), feat);
  poked.vis = Tensor::from(s.vis.shape(), vis);
  const WindowState out2 = refine_window(model, poked, clip, 3);
  for (size_t q = 0; q < s.active.size(); ++q) {
    if (!s.active[q]) continue;
    for (int c = 0; c < 3; ++c) CHECK(out2.disp.data()[q * 3 + c] == out.disp.data()[q * 3 + c]);
    for (int k = 0; k < d; ++k) CHECK(out2.feat.data()[q * d + k] == out.feat.data()[q * d + k]);
    CHECK(out2.vis.data()[q] == out.vis.data()[q]);
  }
}

TEST_CASE("window spans") {
  using Spans = std::vector<std::pair<int, int>>;
  CHECK(window_spans(12, 12) == Spans{{0, 12}});
  CHECK(window_spans(5, 12) == Spans{{0, 5}});
  CHECK(window_spans(18, 12) == Spans{{0, 12}, {6, 12}});
  CHECK(window_spans(24, 12) == Spans{{0, 12}, {6, 12}, {12, 12}});
  CHECK(window_spans(25, 12) == Spans{{0, 12}, {6, 12}, {12, 12}, {18, 7}});
  CHECK_THROWS_AS(window_spans(10, 5), ValidationError);
  CHECK_THROWS_AS(window_spans(0, 12), ValidationError);
  // Every frame is covered and consecutive windows overlap by T/2.
  for (int L = 1; L <= 40; ++L) {
    const auto spans = window_spans(L, 8);
    CHECK(spans.back().first + spans.back().second == L);
    for (size_t j = 1; j < spans.size(); ++j) CHECK(spans[j].first == spans[j - 1].first + 4);
  }
}

TEST_CASE("short video runs as one window equal to refine_window") {
  NoGradGuard guard;
  TrackerModel model(tiny_tracker(6, 2), 4);
  randomize_heads(model, 4);
  const EncodedClip clip = encode_clip(model, make_clip(scene6()));
  const TrackingResult r = run_windowed(model, clip, scene6().queries, 6, 2);
  REQUIRE(r.windows.size() == 1);
  const WindowState direct = refine_window(model, first_window(clip, scene6().queries, 6), clip, 2);
  CHECK(values(r.finals[0].disp) == values(direct.disp));
  CHECK(values(r.finals[0].vis) == values(direct.vis));
  for (size_t i = 0; i < r.tracks.size(); ++i) {
    for (int t = 0; t < 6; ++t) {
      const int64_t q = static_cast<int64_t>(i) * 6 + t;
      const Vec3 expect = scene6().queries[i].xyz + Vec3(direct.disp.data()[q * 3], direct.disp.data()[q * 3 + 1],
                                                         direct.disp.data()[q * 3 + 2]);
      CHECK((r.tracks[i].positions[t] - expect).norm() == 0.0);
    }
  }
}

TEST_CASE("windowed tracking hands off state and activates tracks mid-video") {
  NoGradGuard guard;
  TrackerModel model(tiny_tracker(4, 2), 5);
  randomize_heads(model, 5);
  const EncodedClip clip = encode_clip(model, make_clip(scene10()));
  std::vector<Query> queries = scene10().queries;
  queries[0].query_frame = 7;
  for (const auto& g : scene10().ground_truth) {
    if (g.track_id == queries[0].track_id) queries[0].xyz = g.positions[7];
  }
  const TrackingResult r = run_windowed(model, clip, queries, 4, 2);
  REQUIRE(r.windows.size() == 4);  // (0,4) (2,4) (4,4) (6,4)
  CHECK(r.finals[0].num_tracks() == static_cast<int>(queries.size()) - 1);
  CHECK(r.finals[3].num_tracks() == static_cast<int>(queries.size()));

  const TrackRecord& late = r.tracks[0];
  for (int t = 0; t < 7; ++t) {
    CHECK((late.positions[t] - queries[0].xyz).norm() == 0.0);
    CHECK(late.visible[t] == 0);
    CHECK(late.confidence[t] == 0.0);
  }
  CHECK((late.positions[7] - queries[0].xyz).norm() == 0.0);

  // Overlapped frames report the later window.
  const WindowState& last = r.finals[3];
  for (int n = 0; n < last.num_tracks(); ++n) {
    const int i = last.tracks[n];
    for (int t = 0; t < last.length; ++t) {
      const int64_t q = static_cast<int64_t>(n) * last.length + t;
      if (!last.active[q]) continue;
      const Vec3 p = queries[i].xyz + Vec3(last.disp.data()[q * 3], last.disp.data()[q * 3 + 1], last.disp.data()[q * 3 + 2]);
      CHECK((r.tracks[i].positions[last.start + t] - p).norm() == 0.0);
    }
  }

  const TrackingResult again = run_windowed(model, clip, queries, 4, 2);
  for (size_t i = 0; i < r.tracks.size(); ++i) {
    CHECK(r.tracks[i].positions == again.tracks[i].positions);
    CHECK(r.tracks[i].confidence == again.tracks[i].confidence);
  }
}

TEST_CASE("query frames outside the video are reported per query") {
  NoGradGuard guard;
  TrackerModel model(tiny_tracker(4, 1), 6);
  const EncodedClip clip = encode_clip(model, make_clip(scene6()));
  std::vector<Query> queries = scene6().queries;
  queries[1].query_frame = 6;
  queries[2].query_frame = -1;
  try {
    run_windowed(model, clip, queries, 4, 1);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("track " + std::to_string(queries[1].track_id)) != std::string::npos);
    CHECK(msg.find("track " + std::to_string(queries[2].track_id)) != std::string::npos);
  }
}

TEST_CASE("non-finite updates raise a divergence error naming the iteration") {
  NoGradGuard guard;
  TrackerModel model(tiny_tracker(6, 2), 7);
  for (auto& p : model.params().items()) {
    if (p.name.rfind("refiner.delta_pos", 0) == 0) p.tensor.data()[0] = std::numeric_limits<Real>::quiet_NaN();
  }
  const EncodedClip clip = encode_clip(model, make_clip(scene6()));
  try {
    refine_window(model, first_window(clip, scene6().queries, 6), clip, 2);
    FAIL("expected NumericDivergence");
  } catch (const NumericDivergence& e) {
    CHECK(std::string(e.what()).find("iteration 1") != std::string::npos);
  }
}

TEST_CASE("translating the world translates the tracks") {
  TrackerModel model(tiny_tracker(4, 2), 8);
  randomize_heads(model, 8);
  const SceneData& scene = scene6();
  const Vec3 shift(0.7, -1.3, 0.4);
  TrackOptions opt;
  const TrackingResult base = track_scene(model, scene, opt);

  SceneData moved;
  moved.manifest = scene.manifest;
  moved.cameras = scene.cameras;
  moved.rgb = scene.rgb;
  moved.depth = scene.depth;
  moved.queries = scene.queries;
  for (auto& vc : moved.cameras) {
    for (auto& E : vc.E) {
      // World-to-camera extrinsic: x_cam = R x + t, so shifting the world by s moves t by -R s.
      E.block<3, 1>(0, 3) -= E.block<3, 3>(0, 0) * shift;
    }
  }
  for (auto& q : moved.queries) q.xyz += shift;
  const TrackingResult shifted = track_scene(model, moved, opt);
  double worst = 0, worst_logit = 0;
  for (size_t i = 0; i < base.tracks.size(); ++i) {
    for (size_t t = 0; t < base.tracks[i].positions.size(); ++t) {
      worst = std::max(worst, (shifted.tracks[i].positions[t] - base.tracks[i].positions[t] - shift).norm());
    }
  }
  for (size_t k = 0; k < base.logits.size(); ++k) worst_logit = std::max(worst_logit, std::abs(base.logits[k] - shifted.logits[k]));
  CHECK(worst < 1e-4);
  CHECK(worst_logit < 1e-5);
}

TEST_CASE("saved models reload to identical predictions") {
  NoGradGuard guard;
  TrackerModel model(tiny_tracker(4, 2), 9);
  randomize_heads(model, 9);
  const fs::path dir = temp_dir("tracker_ckpt");
  save_model(model, dir / "m.bin");
  auto loaded = load_tracker(dir / "m.bin");
  const EncodedClip a = encode_clip(model, make_clip(scene6()));
  const EncodedClip b = encode_clip(*loaded, make_clip(scene6()));
  const TrackingResult ra = run_windowed(model, a, scene6().queries, 4, 2);
  const TrackingResult rb = run_windowed(*loaded, b, scene6().queries, 4, 2);
  CHECK(ra.logits == rb.logits);
  for (size_t i = 0; i < ra.tracks.size(); ++i) CHECK(ra.tracks[i].positions == rb.tracks[i].positions);
  fs::remove_all(dir);
}

TEST_CASE("visibility threshold") {
  const std::vector<double> logits = {0.0, -10.0, 10.0, -1e-9, 2.0, -2.0};
  const auto v = predict_visibility(logits);
  CHECK(v == std::vector<uint8_t>{1, 0, 1, 0, 1, 0});
  // Thresholding sigma at p equals thresholding the logit at logit(p).
  for (double p : {0.1, 0.3, 0.7, 0.9}) {
    const double cut = std::log(p / (1 - p));
    const auto vp = predict_visibility(logits, p);
    for (size_t i = 0; i < logits.size(); ++i) CHECK(vp[i] == (logits[i] >= cut - 1e-12));
  }
}
