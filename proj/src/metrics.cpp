#include "mvt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "mvt/errors.hpp"

namespace mvt {

void EvalConfig::validate() const {
  if (thresholds.empty()) throw ValidationError("eval config: at least one threshold is required");
  for (size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0) || (i > 0 && !(thresholds[i] > thresholds[i - 1]))) {
      throw ValidationError("eval config: thresholds must be positive and strictly increasing");
    }
  }
  for (size_t i = 0; i < pixel_thresholds.size(); ++i) {
    if (!(pixel_thresholds[i] > 0) || (i > 0 && !(pixel_thresholds[i] > pixel_thresholds[i - 1]))) {
      throw ValidationError("eval config: pixel thresholds must be positive and strictly increasing");
    }
  }
}

std::vector<double> reference_thresholds(double scale) {
  std::vector<double> out;
  for (int k = 0; k < 5; ++k) out.push_back(0.05 * std::ldexp(1.0, k) * scale);
  return out;
}

std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

void check_lengths(size_t a, size_t b, size_t c, const char* what) {
  if (a != b || b != c) throw ValidationError(std::string(what) + ": prediction and ground truth lengths differ");
}

}  // namespace

std::optional<double> mte(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                          const std::vector<uint8_t>& gt_vis, int first) {
  check_lengths(pred.size(), gt.size(), gt_vis.size(), "mte");
  std::vector<double> errors;
  for (size_t t = std::max(first, 0); t < gt.size(); ++t) {
    if (gt_vis[t]) errors.push_back((pred[t] - gt[t]).norm());
  }
  return median(std::move(errors));
}

double occlusion_accuracy(const std::vector<uint8_t>& pred_vis, const std::vector<uint8_t>& gt_vis, int first) {
  if (pred_vis.size() != gt_vis.size()) throw ValidationError("occlusion_accuracy: lengths differ");
  int correct = 0, total = 0;
  for (size_t t = std::max(first, 0); t < gt_vis.size(); ++t) {
    correct += (pred_vis[t] != 0) == (gt_vis[t] != 0);
    ++total;
  }
  return total == 0 ? 1.0 : static_cast<double>(correct) / total;
}

std::optional<double> delta(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                            const std::vector<uint8_t>& gt_vis, double x, int first) {
  check_lengths(pred.size(), gt.size(), gt_vis.size(), "delta");
  int hit = 0, total = 0;
  for (size_t t = std::max(first, 0); t < gt.size(); ++t) {
    if (!gt_vis[t]) continue;
    ++total;
    hit += (pred[t] - gt[t]).norm() < x;
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(hit) / total;
}

std::optional<double> jaccard(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                              const std::vector<uint8_t>& pred_vis, const std::vector<uint8_t>& gt_vis, double x,
                              int first) {
  check_lengths(pred.size(), gt.size(), gt_vis.size(), "jaccard");
  if (pred_vis.size() != gt.size()) throw ValidationError("jaccard: visibility length differs");
  double num = 0, den = 0;
  for (size_t t = std::max(first, 0); t < gt.size(); ++t) {
    const double v = gt_vis[t] ? 1 : 0;
    const double vh = pred_vis[t] ? 1 : 0;
    const double a = (pred[t] - gt[t]).norm() < x ? 1 : 0;
    num += v * vh * a;
    den += v + (1 - v) * vh + v * vh * (1 - a);
  }
  if (den == 0) return std::nullopt;
  return num / den;
}

std::optional<double> average_jaccard(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt,
                                      const std::vector<uint8_t>& pred_vis, const std::vector<uint8_t>& gt_vis,
                                      const std::vector<double>& thresholds, int first) {
  double sum = 0;
  for (double x : thresholds) {
    const auto j = jaccard(pred, gt, pred_vis, gt_vis, x, first);
    if (!j) return std::nullopt;
    sum += *j;
  }
  return sum / static_cast<double>(thresholds.size());
}

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Means of present values; per-threshold vectors averaged elementwise.
struct Accumulator {
  std::vector<double> mte, oa, delta_avg, aj;
  std::vector<std::vector<double>> delta, aj_x;

  Aggregate finish(size_t h) const {
    Aggregate a;
    if (!mte.empty()) a.mte = mean_of(mte);
    if (!oa.empty()) a.oa = mean_of(oa);
    if (!delta_avg.empty()) a.delta_avg = mean_of(delta_avg);
    if (!aj.empty()) a.aj = mean_of(aj);
    auto columns = [h](const std::vector<std::vector<double>>& rows) {
      std::vector<double> out;
      if (rows.empty()) return out;
      for (size_t i = 0; i < h; ++i) {
        double s = 0;
        for (const auto& r : rows) s += r[i];
        out.push_back(s / static_cast<double>(rows.size()));
      }
      return out;
    };
    a.delta = columns(delta);
    a.aj_per_threshold = columns(aj_x);
    return a;
  }
};

}  // namespace

SceneMetrics evaluate_scene(const std::string& scene, const std::vector<TrackRecord>& pred,
                            const std::vector<TrackRecord>& gt, const EvalConfig& config) {
  config.validate();
  std::map<int, const TrackRecord*> by_id;
  for (const TrackRecord& p : pred) by_id[p.track_id] = &p;
  std::string missing;
  for (const TrackRecord& g : gt) {
    if (!by_id.count(g.track_id)) missing += (missing.empty() ? "" : ", ") + std::to_string(g.track_id);
  }
  if (!missing.empty()) throw ValidationError("scene " + scene + ": no prediction for tracks " + missing);

  SceneMetrics out;
  out.scene = scene;
  Accumulator acc;
  for (const TrackRecord& g : gt) {
    const TrackRecord& p = *by_id[g.track_id];
    if (p.positions.size() != g.positions.size() || p.visible.size() != g.visible.size()) {
      throw ValidationError("scene " + scene + ": track " + std::to_string(g.track_id) + " has " +
                            std::to_string(p.positions.size()) + " predicted frames, expected " +
                            std::to_string(g.positions.size()));
    }
    const int first = g.query_frame;
    TrackMetrics m;
    m.track_id = g.track_id;
    m.oa = occlusion_accuracy(p.visible, g.visible, first);
    acc.oa.push_back(m.oa);
    m.mte = mte(p.positions, g.positions, g.visible, first);
    if (m.mte) {
      for (double x : config.thresholds) m.delta.push_back(*delta(p.positions, g.positions, g.visible, x, first));
      m.delta_avg = mean_of(m.delta);
      acc.mte.push_back(*m.mte);
      acc.delta_avg.push_back(*m.delta_avg);
      acc.delta.push_back(m.delta);
    } else {
      ++out.excluded_spatial;
    }
    bool jaccard_ok = true;
    for (double x : config.thresholds) {
      const auto j = jaccard(p.positions, g.positions, p.visible, g.visible, x, first);
      if (!j) {
        jaccard_ok = false;
        break;
      }
      m.aj.push_back(*j);
    }
    if (jaccard_ok) {
      m.aj_avg = mean_of(m.aj);
      acc.aj.push_back(*m.aj_avg);
      acc.aj_x.push_back(m.aj);
    } else {
      m.aj.clear();
      ++out.excluded_jaccard;
    }
    out.tracks.push_back(std::move(m));
  }
  out.mean = acc.finish(config.thresholds.size());
  return out;
}

MetricsReport aggregate_report(std::vector<SceneMetrics> scenes, const EvalConfig& config) {
  MetricsReport r;
  r.thresholds = config.thresholds;
  Accumulator acc;
  for (const SceneMetrics& s : scenes) {
    if (s.mean.mte) acc.mte.push_back(*s.mean.mte);
    if (s.mean.oa) acc.oa.push_back(*s.mean.oa);
    if (s.mean.delta_avg) acc.delta_avg.push_back(*s.mean.delta_avg);
    if (s.mean.aj) acc.aj.push_back(*s.mean.aj);
    if (!s.mean.delta.empty()) acc.delta.push_back(s.mean.delta);
    if (!s.mean.aj_per_threshold.empty()) acc.aj_x.push_back(s.mean.aj_per_threshold);
    r.excluded_spatial += s.excluded_spatial;
    r.excluded_jaccard += s.excluded_jaccard;
  }
  r.dataset = acc.finish(config.thresholds.size());
  r.scenes = std::move(scenes);
  return r;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

nlohmann::json aggregate_json(const Aggregate& a) {
  return {{"mte", opt(a.mte)},
          {"oa", opt(a.oa)},
          {"delta_avg", opt(a.delta_avg)},
          {"aj", opt(a.aj)},
          {"delta", a.delta},
          {"aj_per_threshold", a.aj_per_threshold}};
}

}  // namespace

nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json dataset = nlohmann::json::object();
  nlohmann::json scenes = nlohmann::json::object();
  for (const SceneMetrics& s : r.scenes) {
    nlohmann::json tracks = nlohmann::json::object();
    for (const TrackMetrics& t : s.tracks) {
      tracks[std::to_string(t.track_id)] = {{"mte", opt(t.mte)}, {"oa", t.oa}, {"delta", t.delta}, {"aj", t.aj}};
    }
    dataset[s.scene] = tracks;
    scenes[s.scene] = aggregate_json(s.mean);
    scenes[s.scene]["excluded_spatial"] = s.excluded_spatial;
    scenes[s.scene]["excluded_jaccard"] = s.excluded_jaccard;
  }
  return {{"thresholds", r.thresholds},
          {"dataset", dataset},
          {"aggregates", {{"dataset", aggregate_json(r.dataset)}, {"scenes", scenes}}},
          {"exclusions", {{"spatial", r.excluded_spatial}, {"jaccard", r.excluded_jaccard}}}};
}

std::string report_to_csv(const MetricsReport& r) {
  std::string out = "scene,track,metric,value\n";
  char buf[256];
  auto row = [&](const std::string& scene, const std::string& track, const std::string& metric, double v) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%.9g\n", scene.c_str(), track.c_str(), metric.c_str(), v);
    out += buf;
  };
  auto thresholds = [&](const std::string& scene, const std::string& track, const char* name,
                        const std::vector<double>& v) {
    for (size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%s@%.6g", name, r.thresholds[i]);
      row(scene, track, buf, v[i]);
    }
  };
  auto aggregate = [&](const std::string& scene, const Aggregate& a) {
    if (a.mte) row(scene, "mean", "mte", *a.mte);
    if (a.oa) row(scene, "mean", "oa", *a.oa);
    if (a.delta_avg) row(scene, "mean", "delta_avg", *a.delta_avg);
    if (a.aj) row(scene, "mean", "aj", *a.aj);
    thresholds(scene, "mean", "delta", a.delta);
    thresholds(scene, "mean", "aj", a.aj_per_threshold);
  };
  for (const SceneMetrics& s : r.scenes) {
    for (const TrackMetrics& t : s.tracks) {
      const std::string id = std::to_string(t.track_id);
      if (t.mte) row(s.scene, id, "mte", *t.mte);
      row(s.scene, id, "oa", t.oa);
      if (t.delta_avg) row(s.scene, id, "delta_avg", *t.delta_avg);
      if (t.aj_avg) row(s.scene, id, "aj", *t.aj_avg);
      thresholds(s.scene, id, "delta", t.delta);
      thresholds(s.scene, id, "aj", t.aj);
    }
    aggregate(s.scene, s.mean);
  }
  aggregate("dataset", r.dataset);
  return out;
}

std::vector<PixelTrack> project_tracks_2d(const std::vector<TrackRecord>& tracks, const ViewCameras& cams) {
  std::vector<PixelTrack> out;
  for (const TrackRecord& tr : tracks) {
    PixelTrack p;
    for (size_t t = 0; t < tr.positions.size(); ++t) {
      const Projection pr = project_point(cams.at(static_cast<int>(t)), tr.positions[t]);
      p.pixels.push_back(pr.pixel);
      p.valid.push_back(!pr.behind_camera);
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<double> delta_2d_view(const std::vector<TrackRecord>& pred, const std::vector<TrackRecord>& gt,
                                  const ViewCameras& cams, const std::vector<double>& pixel_thresholds) {
  std::map<int, size_t> by_id;
  for (size_t i = 0; i < pred.size(); ++i) by_id[pred[i].track_id] = i;
  const auto pp = project_tracks_2d(pred, cams);
  const auto gp = project_tracks_2d(gt, cams);
  std::vector<double> sums(pixel_thresholds.size(), 0.0);
  int tracks = 0;
  for (size_t g = 0; g < gt.size(); ++g) {
    const auto it = by_id.find(gt[g].track_id);
    if (it == by_id.end()) throw ValidationError("delta_2d: no prediction for track " + std::to_string(gt[g].track_id));
    const PixelTrack& a = pp[it->second];
    const PixelTrack& b = gp[g];
    std::vector<int> hits(pixel_thresholds.size(), 0);
    int total = 0;
    for (size_t t = std::max(gt[g].query_frame, 0); t < b.pixels.size(); ++t) {
      if (!gt[g].visible[t] || !a.valid[t] || !b.valid[t]) continue;
      ++total;
      const double e = (a.pixels[t] - b.pixels[t]).norm();
      for (size_t i = 0; i < pixel_thresholds.size(); ++i) hits[i] += e < pixel_thresholds[i];
    }
    if (total == 0) continue;
    ++tracks;
    for (size_t i = 0; i < hits.size(); ++i) sums[i] += static_cast<double>(hits[i]) / total;
  }
  if (tracks > 0) {
    for (double& s : sums) s /= tracks;
  }
  return sums;
}

std::vector<double> delta_2d(const std::vector<TrackRecord>& pred, const std::vector<TrackRecord>& gt,
                             const std::vector<ViewCameras>& cams, const std::vector<double>& pixel_thresholds) {
  std::vector<double> out(pixel_thresholds.size(), 0.0);
  if (cams.empty()) return out;
  for (const ViewCameras& c : cams) {
    const auto v = delta_2d_view(pred, gt, c, pixel_thresholds);
    for (size_t i = 0; i < v.size(); ++i) out[i] += v[i];
  }
  for (double& x : out) x /= static_cast<double>(cams.size());
  return out;
}

}  // namespace mvt
