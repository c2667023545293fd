#include "mvt/scenesim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <thread>

#include "json.hpp"
#include "mvt/errors.hpp"
#include "mvt/parallel.hpp"
#include "mvt/scene_io.hpp"

namespace mvt {

namespace {

Mat3 yaw_matrix(double yaw) { return Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix(); }

// Ray (origin + t dir) against a sphere of radius r at the origin.
bool hit_sphere(const Vec3& o, const Vec3& d, double r, double t_min, double t_max, double& t_out) {
  const double a = d.squaredNorm();
  const double b = o.dot(d);
  const double c = o.squaredNorm() - r * r;
  const double disc = b * b - a * c;
  if (disc < 0) return false;
  const double s = std::sqrt(disc);
  for (double t : {(-b - s) / a, (-b + s) / a}) {
    if (t > t_min && t < t_max) {
      t_out = t;
      return true;
    }
  }
  return false;
}

// Slab test against the box [-h, h]. Reports the entry (or exit, when the
// origin lies inside) distance and the face normal.
bool hit_box(const Vec3& o, const Vec3& d, const Vec3& h, double t_min, double t_max, double& t_out, Vec3& normal) {
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int axis0 = 0, axis1 = 0;
  for (int k = 0; k < 3; ++k) {
    if (d[k] == 0) {
      if (o[k] < -h[k] || o[k] > h[k]) return false;
      continue;
    }
    double a = (-h[k] - o[k]) / d[k], b = (h[k] - o[k]) / d[k];
    if (a > b) std::swap(a, b);
    if (a > t0) {
      t0 = a;
      axis0 = k;
    }
    if (b < t1) {
      t1 = b;
      axis1 = k;
    }
  }
  if (t0 > t1) return false;
  if (t0 > t_min && t0 < t_max) {
    t_out = t0;
    normal = Vec3::Zero();
    normal[axis0] = d[axis0] > 0 ? -1 : 1;
    return true;
  }
  if (t1 > t_min && t1 < t_max) {
    t_out = t1;
    normal = Vec3::Zero();
    normal[axis1] = d[axis1] > 0 ? 1 : -1;
    return true;
  }
  return false;
}

Vec3 hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h * 6, 6.0);
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  Vec3 rgb;
  if (hp < 1) rgb = {c, x, 0};
  else if (hp < 2) rgb = {x, c, 0};
  else if (hp < 3) rgb = {0, c, x};
  else if (hp < 4) rgb = {0, x, c};
  else if (hp < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  return rgb + Vec3::Constant(v - c);
}

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Pose RigidMotion::at(int frame) const {
  Pose pose;
  if (keys.empty()) return pose;
  if (frame <= keys.front().frame || keys.size() == 1) {
    pose.rotation = yaw_matrix(keys.front().yaw);
    pose.translation = keys.front().translation;
    return pose;
  }
  if (frame >= keys.back().frame) {
    pose.rotation = yaw_matrix(keys.back().yaw);
    pose.translation = keys.back().translation;
    return pose;
  }
  size_t i = 0;
  while (keys[i + 1].frame <= frame) ++i;
  const Key& a = keys[i];
  const Key& b = keys[i + 1];
  const double span = b.frame - a.frame;
  const double dt = frame - a.frame;
  // Per-frame rates keep integer velocities exact.
  const Vec3 velocity = (b.translation - a.translation) / span;
  pose.translation = a.translation + velocity * dt;
  pose.rotation = yaw_matrix(a.yaw + (b.yaw - a.yaw) / span * dt);
  return pose;
}

bool RigidMotion::is_static() const {
  for (const Key& k : keys) {
    if (k.translation != keys.front().translation || k.yaw != keys.front().yaw) return false;
  }
  return true;
}

Vec3 Albedo::at(const Vec3& local) const {
  const long cell = static_cast<long>(std::floor(local.x() * checker_frequency)) +
                    static_cast<long>(std::floor(local.y() * checker_frequency)) +
                    static_cast<long>(std::floor(local.z() * checker_frequency));
  const Vec3 base = (cell & 1) ? color_b : color_a;
  const double n = std::sin(17.3 * local.x() + noise_phase) * std::sin(13.1 * local.y() + 2 * noise_phase) *
                   std::sin(11.7 * local.z() + 3 * noise_phase);
  return (base * (1 + noise_amplitude * n)).cwiseMax(0.0).cwiseMin(1.0);
}

double RigidBody::surface_area() const {
  switch (kind) {
    case ShapeKind::kSphere:
      return 4 * std::numbers::pi * radius * radius;
    case ShapeKind::kBox: {
      const Vec3& h = half_extents;
      return 8 * (h.x() * h.y() + h.y() * h.z() + h.z() * h.x());
    }
    case ShapeKind::kPlane:
      return std::numeric_limits<double>::infinity();
  }
  return 0;
}

std::optional<RayHit> cast_ray(const Scene& scene, int frame, const Vec3& origin, const Vec3& direction,
                               double t_min, double t_max) {
  std::optional<RayHit> best;
  for (size_t i = 0; i < scene.bodies.size(); ++i) {
    const RigidBody& body = scene.bodies[i];
    double t = 0;
    if (body.kind == ShapeKind::kPlane) {
      if (direction.z() == 0) continue;
      t = (body.plane_height - origin.z()) / direction.z();
      if (!(t > t_min && t < t_max)) continue;
      const Vec3 p = origin + t * direction;
      if (std::abs(p.x()) > body.plane_half_extent || std::abs(p.y()) > body.plane_half_extent) continue;
      best = RayHit{t, static_cast<int>(i), Vec3::UnitZ(), Vec3(p.x(), p.y(), 0)};
      t_max = t;
      continue;
    }
    const Pose pose = body.motion.at(frame);
    const Vec3 o = pose.inverse_apply(origin);
    const Vec3 d = pose.rotation.transpose() * direction;
    Vec3 normal;
    bool hit = false;
    if (body.kind == ShapeKind::kSphere) {
      hit = hit_sphere(o, d, body.radius, t_min, t_max, t);
      if (hit) normal = (o + t * d).normalized();
    } else {
      hit = hit_box(o, d, body.half_extents, t_min, t_max, t, normal);
    }
    if (!hit) continue;
    best = RayHit{t, static_cast<int>(i), pose.rotation * normal, o + t * d};
    t_max = t;
  }
  return best;
}

std::vector<RenderedView> render_views(const Scene& scene, const std::vector<Camera>& cameras, int frame) {
  if (cameras.empty()) throw ValidationError("render_views: no cameras");
  std::vector<RenderedView> out;
  out.reserve(cameras.size());
  for (const Camera& cam : cameras) {
    if (cam.width <= 0 || cam.height <= 0) throw ValidationError("render_views: zero resolution");
    RenderedView view;
    view.rgb = RgbImage(cam.height, cam.width);
    view.depth = DepthMap(cam.height, cam.width);
    view.body_index.assign(static_cast<size_t>(cam.height) * cam.width, -1);
    const Mat3 Rt = cam.rotation().transpose();
    const Mat3 Kinv = cam.K.inverse();
    const Vec3 origin = cam.center();
    for (int r = 0; r < cam.height; ++r) {
      for (int c = 0; c < cam.width; ++c) {
        // Unnormalized so the ray parameter equals camera-space depth.
        const Vec3 dir = Rt * (Kinv * Vec3(c, r, 1));
        const auto hit = cast_ray(scene, frame, origin, dir, 1e-9, std::numeric_limits<double>::infinity());
        if (!hit) continue;
        const RigidBody& body = scene.bodies[hit->body];
        const double shade = 0.35 + 0.65 * std::abs(hit->normal.dot(dir.normalized()));
        const Vec3 color = body.albedo.at(hit->local) * shade;
        uint8_t* px = view.rgb.pixel(r, c);
        for (int k = 0; k < 3; ++k) px[k] = static_cast<uint8_t>(std::lround(std::clamp(color[k], 0.0, 1.0) * 255));
        view.depth.at(r, c) = static_cast<float>(hit->t);
        view.body_index[static_cast<size_t>(r) * cam.width + c] = hit->body;
      }
    }
    out.push_back(std::move(view));
  }
  return out;
}

bool point_visible_in(const Scene& scene, const Camera& cam, int frame, const Vec3& world) {
  const Projection p = project_point(cam, world);
  if (p.behind_camera || !p.in_bounds) return false;
  const Vec3 to_cam = cam.center() - world;
  const double dist = to_cam.norm();
  return !cast_ray(scene, frame, world, to_cam / dist, kOcclusionEpsilon, dist - kOcclusionEpsilon);
}

bool point_visible(const Scene& scene, const std::vector<Camera>& cameras, int frame, const Vec3& world) {
  return std::any_of(cameras.begin(), cameras.end(),
                     [&](const Camera& cam) { return point_visible_in(scene, cam, frame, world); });
}

Vec3 sample_surface(const RigidBody& body, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  if (body.kind == ShapeKind::kSphere) {
    std::normal_distribution<double> n(0, 1);
    Vec3 v;
    do {
      v = Vec3(n(rng), n(rng), n(rng));
    } while (v.norm() < 1e-12);
    return body.radius * v.normalized();
  }
  if (body.kind != ShapeKind::kBox) throw ValidationError("sample_surface: unsupported shape");
  const Vec3& h = body.half_extents;
  // Face pair areas: normal x, y, z.
  const double ax = h.y() * h.z(), ay = h.x() * h.z(), az = h.x() * h.y();
  const double pick = u(rng) * (ax + ay + az);
  const int axis = pick < ax ? 0 : (pick < ax + ay ? 1 : 2);
  const double sign = u(rng) < 0.5 ? -1 : 1;
  Vec3 p;
  for (int k = 0; k < 3; ++k) p[k] = (2 * u(rng) - 1) * h[k];
  p[axis] = sign * h[axis];
  return p;
}

uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b, uint64_t c) {
  uint64_t s = splitmix(base);
  s = splitmix(s ^ a);
  s = splitmix(s ^ b);
  return splitmix(s ^ c);
}

std::vector<GroundTruthTrack> sample_tracks(const Scene& scene, const std::vector<Camera>& cameras, int n_tracks,
                                            uint64_t seed) {
  if (n_tracks < 1) throw ValidationError("sample_tracks: n_tracks must be >= 1");
  std::vector<int> candidates;
  std::vector<double> areas;
  for (size_t i = 0; i < scene.bodies.size(); ++i) {
    if (scene.bodies[i].kind == ShapeKind::kPlane) continue;
    candidates.push_back(static_cast<int>(i));
    areas.push_back(scene.bodies[i].surface_area());
  }
  if (candidates.empty()) throw ValidationError("sample_tracks: scene has no bodies to sample");
  const int frames = scene.num_frames;
  const int query_limit = std::max(1, (frames + 1) / 2);
  std::vector<GroundTruthTrack> tracks(n_tracks);
  for (int n = 0; n < n_tracks; ++n) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<uint64_t>(n)));
    std::discrete_distribution<int> pick_body(areas.begin(), areas.end());
    GroundTruthTrack& tr = tracks[n];
    tr.track_id = n;
    // Points never seen in the first half are redrawn a bounded number of times.
    for (int attempt = 0; attempt < 64; ++attempt) {
      const int bi = candidates[pick_body(rng)];
      const RigidBody& body = scene.bodies[bi];
      tr.body_id = body.id;
      tr.local_point = sample_surface(body, rng);
      tr.positions.resize(frames);
      tr.visible.resize(frames);
      for (int t = 0; t < frames; ++t) {
        tr.positions[t] = body.motion.at(t).apply(tr.local_point);
        tr.visible[t] = point_visible(scene, cameras, t, tr.positions[t]);
      }
      std::vector<int> early;
      for (int t = 0; t < query_limit; ++t)
        if (tr.visible[t]) early.push_back(t);
      if (!early.empty()) {
        tr.query_frame = early[std::uniform_int_distribution<size_t>(0, early.size() - 1)(rng)];
        break;
      }
      tr.query_frame = 0;
    }
  }
  return tracks;
}

void SimConfig::validate() const {
  if (num_scenes < 1) throw ValidationError("simulate: scenes must be >= 1");
  if (num_views < 1 || num_views > 8) throw ValidationError("simulate: views must be in 1..8, got " + std::to_string(num_views));
  if (num_frames < 1) throw ValidationError("simulate: frames must be >= 1");
  if (width <= 0 || height <= 0) throw ValidationError("simulate: resolution must be positive");
  if (width % 32 != 0 || height % 32 != 0) throw ValidationError("simulate: width and height must be multiples of 32");
  if (num_tracks < 1) throw ValidationError("simulate: tracks must be >= 1");
  if (min_bodies < 1 || max_bodies < min_bodies) throw ValidationError("simulate: invalid body count range");
  if (!(max_speed >= 0) || !(max_yaw_rate >= 0)) throw ValidationError("simulate: motion caps must be >= 0");
  if (!(ground_half_extent > 0)) throw ValidationError("simulate: ground_half_extent must be > 0");
  if (!(camera_distance > 0) || !(field_of_view_deg > 0 && field_of_view_deg < 180))
    throw ValidationError("simulate: invalid camera placement");
  if (!(threshold_scale > 0)) throw ValidationError("simulate: threshold_scale must be > 0");
}

Scene make_random_scene(const SimConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Scene scene;
  scene.num_frames = config.num_frames;

  RigidBody ground;
  ground.id = 0;
  ground.kind = ShapeKind::kPlane;
  ground.plane_half_extent = config.ground_half_extent;
  ground.albedo = Albedo{Vec3(0.62, 0.62, 0.6), Vec3(0.36, 0.36, 0.38), 2.5, 0.0, 0.0};
  scene.bodies.push_back(ground);

  const int count = std::uniform_int_distribution<int>(config.min_bodies, config.max_bodies)(rng);
  std::vector<uint8_t> moving(count);
  for (int i = 0; i < count; ++i) moving[i] = u(rng) < 0.5;
  if (count >= 2) {
    // Guarantee both static and moving bodies.
    moving[0] = 1;
    moving[1] = 0;
  }
  const double extent = 0.8;
  std::vector<std::pair<Vec3, double>> placed;  // (center, bounding radius)
  for (int i = 0; i < count; ++i) {
    RigidBody body;
    body.id = i + 1;
    body.kind = u(rng) < 0.5 ? ShapeKind::kSphere : ShapeKind::kBox;
    double bound = 0, lift = 0;
    if (body.kind == ShapeKind::kSphere) {
      body.radius = 0.15 + 0.2 * u(rng);
      bound = lift = body.radius;
    } else {
      body.half_extents = Vec3(0.1 + 0.2 * u(rng), 0.1 + 0.2 * u(rng), 0.1 + 0.2 * u(rng));
      bound = body.half_extents.head<2>().norm();
      lift = body.half_extents.z();
    }
    Vec3 center;
    for (int attempt = 0; attempt < 200; ++attempt) {
      center = Vec3((2 * u(rng) - 1) * extent, (2 * u(rng) - 1) * extent, lift);
      bool clear = true;
      for (const auto& [c, b] : placed) clear &= (c - center).head<2>().norm() > b + bound + 0.05;
      if (clear) break;
    }
    placed.emplace_back(center, bound);

    double yaw = 2 * std::numbers::pi * u(rng);
    body.motion.keys.push_back({0, center, yaw});
    if (moving[i] && config.num_frames > 1) {
      const int segment = 6;
      Vec3 pos = center;
      for (int f = 0; f < config.num_frames - 1; f += segment) {
        const int len = std::min(segment, config.num_frames - 1 - f);
        const double heading = 2 * std::numbers::pi * u(rng);
        const double speed = config.max_speed * (0.3 + 0.7 * u(rng));
        Vec3 step(std::cos(heading) * speed, std::sin(heading) * speed, 0);
        // Turn around instead of leaving the arena.
        for (int k = 0; k < 2; ++k)
          if (std::abs(pos[k] + step[k] * len) > extent + 0.2) step[k] = -step[k];
        pos += step * len;
        yaw += config.max_yaw_rate * (2 * u(rng) - 1) * len;
        body.motion.keys.push_back({f + len, pos, yaw});
      }
    }
    const double hue = u(rng);
    const Vec3 a = hsv_to_rgb(hue, 0.55 + 0.35 * u(rng), 0.75 + 0.25 * u(rng));
    body.albedo = Albedo{a, a * 0.45, 5 + 4 * u(rng), 0.1, 2 * std::numbers::pi * u(rng)};
    scene.bodies.push_back(body);
  }
  return scene;
}

std::vector<Camera> make_random_cameras(const SimConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<Camera> cams;
  const double offset = 2 * std::numbers::pi * u(rng);
  const double f = 0.5 * config.width / std::tan(0.5 * config.field_of_view_deg * std::numbers::pi / 180);
  for (int v = 0; v < config.num_views; ++v) {
    const double az = offset + 2 * std::numbers::pi * v / config.num_views + 0.3 * (2 * u(rng) - 1);
    const double el = 0.35 + 0.4 * u(rng);
    const double dist = config.camera_distance * (0.9 + 0.2 * u(rng));
    const Vec3 eye(dist * std::cos(el) * std::cos(az), dist * std::cos(el) * std::sin(az), dist * std::sin(el));
    const Vec3 target(0.2 * u(rng) - 0.1, 0.2 * u(rng) - 0.1, 0.15);
    Camera cam;
    cam.view_id = v;
    cam.width = config.width;
    cam.height = config.height;
    cam.K = intrinsics(f, f, (config.width - 1) / 2.0, (config.height - 1) / 2.0);
    cam.E = look_at(eye, target);
    cams.push_back(cam);
  }
  return cams;
}

GeneratedScene generate_scene(const SimConfig& config, int index) {
  std::mt19937_64 rng(derive_seed(config.seed, static_cast<uint64_t>(index), 1));
  GeneratedScene g;
  char name[32];
  std::snprintf(name, sizeof(name), "scene_%04d", index);
  g.name = name;
  g.scene = make_random_scene(config, rng);
  g.cameras = make_random_cameras(config, rng);
  g.tracks = sample_tracks(g.scene, g.cameras, config.num_tracks, derive_seed(config.seed, index, 2));
  return g;
}

std::string generate_dataset(const SimConfig& config, const std::filesystem::path& out_dir, int threads) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw IoError(out_dir.string() + ": cannot create output directory");
  }
  nlohmann::json index;
  index["num_scenes"] = config.num_scenes;
  index["scenes"] = nlohmann::json::array();
  for (int i = 0; i < config.num_scenes; ++i) {
    const GeneratedScene g = generate_scene(config, i);
    const fs::path dir = out_dir / g.name;
    SceneManifest m;
    m.scene_id = g.name;
    m.num_views = config.num_views;
    m.num_frames = config.num_frames;
    m.width = config.width;
    m.height = config.height;
    m.seed = derive_seed(config.seed, static_cast<uint64_t>(i));
    m.num_tracks = config.num_tracks;
    m.threshold_scale = config.threshold_scale;
    write_file(dir / "manifest.json", manifest_to_json(m));

    std::vector<ViewCameras> cams;
    for (const Camera& c : g.cameras) cams.push_back({c.view_id, c.width, c.height, c.K, {c.E}});
    write_file(dir / "cameras.json", cameras_to_json(cams));

    // Frames render independently; each task writes only its own files.
    parallel_for(config.num_frames, threads, [&](int t) {
      const auto views = render_views(g.scene, g.cameras, t);
      for (size_t v = 0; v < views.size(); ++v) {
        write_ppm(rgb_path(dir, g.cameras[v].view_id, t), views[v].rgb);
        write_mvd(depth_path(dir, g.cameras[v].view_id, t), views[v].depth);
      }
    });

    std::vector<TrackRecord> records;
    std::vector<Query> queries;
    for (const auto& tr : g.tracks) {
      records.push_back({tr.track_id, tr.query_frame, tr.positions, tr.visible, {}});
      queries.push_back({tr.track_id, tr.query_frame, tr.positions[tr.query_frame]});
    }
    write_gt_tracks_csv(dir / "gt_tracks.csv", records);
    write_queries_csv(dir / "queries.csv", queries);
    index["scenes"].push_back(g.name);
  }
  index["config"] = {{"num_views", config.num_views},     {"num_frames", config.num_frames},
                     {"width", config.width},             {"height", config.height},
                     {"num_tracks", config.num_tracks},   {"min_bodies", config.min_bodies},
                     {"max_bodies", config.max_bodies},   {"max_speed", config.max_speed},
                     {"max_yaw_rate", config.max_yaw_rate}, {"camera_distance", config.camera_distance},
                     {"ground_half_extent", config.ground_half_extent},
                     {"field_of_view_deg", config.field_of_view_deg},
                     {"threshold_scale", config.threshold_scale}, {"seed", config.seed}};
  const std::string text = index.dump(2) + "\n";
  write_file(out_dir / "dataset.json", text);
  return text;
}

}  // namespace mvt
