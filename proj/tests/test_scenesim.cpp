#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "mvt/errors.hpp"
#include "mvt/scene_io.hpp"
#include "mvt/scenesim.hpp"

using namespace mvt;

namespace {

Camera axis_camera(int size, double f) {
  Camera cam;
  cam.width = cam.height = size;
  cam.K = intrinsics(f, f, (size - 1) / 2.0, (size - 1) / 2.0);
  return cam;
}

RigidBody sphere(int id, Vec3 center, double r) {
  RigidBody b;
  b.id = id;
  b.kind = ShapeKind::kSphere;
  b.radius = r;
  b.motion.keys.push_back({0, center, 0});
  return b;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mvt_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("sphere on the optical axis renders a symmetric depth bowl") {
  Scene scene;
  scene.bodies.push_back(sphere(1, Vec3(0, 0, 5), 1));
  const int n = 33;
  const auto views = render_views(scene, {axis_camera(n, 40)}, 0);
  const DepthMap& d = views[0].depth;
  const int mid = n / 2;
  REQUIRE(d.valid(mid, mid));
  CHECK(std::abs(d.at(mid, mid) - 4.0f) < 1e-5);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      if (!d.valid(r, c)) continue;
      CHECK(d.at(r, c) >= d.at(mid, mid));
      REQUIRE(d.valid(r, n - 1 - c));
      CHECK(std::abs(d.at(r, c) - d.at(r, n - 1 - c)) < 1e-4);
      CHECK(std::abs(d.at(r, c) - d.at(n - 1 - r, c)) < 1e-4);
      CHECK(std::abs(d.at(r, c) - d.at(c, r)) < 1e-4);
    }
  }
}

TEST_CASE("empty scene and plane scene") {
  Scene empty;
  const auto e = render_views(empty, {axis_camera(8, 10)}, 0);
  CHECK(e[0].depth.valid_count() == 0);

  Scene plane;
  RigidBody g;
  g.kind = ShapeKind::kPlane;
  g.plane_height = 3;
  plane.bodies.push_back(g);
  const auto p = render_views(plane, {axis_camera(16, 10)}, 0);
  CHECK(p[0].depth.valid_count() == 256);
  for (float v : p[0].depth.values) CHECK(std::abs(v - 3.0f) < 1e-6);
}

TEST_CASE("render_views rejects zero resolution") {
  Scene s;
  s.bodies.push_back(sphere(1, Vec3(0, 0, 5), 1));
  CHECK_THROWS_AS(render_views(s, {axis_camera(0, 10)}, 0), ValidationError);
  CHECK_THROWS_AS(render_views(s, {}, 0), ValidationError);
}

TEST_CASE("box faces and rotated boxes hit at analytic depths") {
  Scene s;
  RigidBody box;
  box.kind = ShapeKind::kBox;
  box.half_extents = Vec3(0.5, 0.5, 0.5);
  box.motion.keys.push_back({0, Vec3(0, 0, 4), 0.0});
  box.motion.keys.push_back({10, Vec3(0, 0, 4), std::numbers::pi / 2});
  s.bodies.push_back(box);
  // A quarter turn about z leaves the near face at z = 3.5.
  for (int frame : {0, 10}) {
    const auto hit = cast_ray(s, frame, Vec3::Zero(), Vec3(0, 0, 1), 0, 100);
    REQUIRE(hit);
    CHECK(std::abs(hit->t - 3.5) < 1e-12);
    CHECK((hit->normal - Vec3(0, 0, -1)).norm() < 1e-12);
  }
  // Halfway the box has turned 45 degrees around the optical axis; the face still sits at z = 3.5.
  const auto mid = cast_ray(s, 5, Vec3::Zero(), Vec3(0, 0, 1), 0, 100);
  REQUIRE(mid);
  CHECK(std::abs(mid->t - 3.5) < 1e-12);
}

TEST_CASE("sample_tracks visibility and advection") {
  const int frames = 5;
  Camera cam = axis_camera(64, 60);  // looks down +z from the origin

  SUBCASE("static body without occluders is always visible") {
    Scene s;
    s.num_frames = frames;
    s.bodies.push_back(sphere(1, Vec3(0, 0, 5), 0.5));
    // Only the camera-facing hemisphere is visible; every sampled point
    // that is visible at its query frame stays visible for a static body.
    const auto tracks = sample_tracks(s, {cam}, 50, 3);
    for (const auto& tr : tracks) {
      const bool facing = tr.local_point.z() < -1e-3;
      for (int t = 0; t < frames; ++t) CHECK(tr.visible[t] == (facing ? 1 : tr.visible[0]));
      if (facing) CHECK(tr.visible[0] == 1);
    }
  }
  SUBCASE("far side of a sphere is hidden") {
    Scene s;
    s.num_frames = 1;
    s.bodies.push_back(sphere(1, Vec3(0, 0, 5), 0.5));
    CHECK_FALSE(point_visible(s, {cam}, 0, Vec3(0, 0, 5.5)));
    CHECK(point_visible(s, {cam}, 0, Vec3(0, 0, 4.5)));
  }
  SUBCASE("integer translation per frame advects exactly") {
    Scene s;
    s.num_frames = frames;
    RigidBody b = sphere(1, Vec3(0, 0, 5), 0.5);
    b.motion.keys.push_back({frames - 1, Vec3(frames - 1, 0, 5), 0});
    s.bodies.push_back(b);
    const auto tracks = sample_tracks(s, {cam}, 10, 4);
    for (const auto& tr : tracks) {
      for (int t = 0; t + 1 < frames; ++t) {
        // Exact up to the rounding of the stored positions themselves.
        CHECK(((tr.positions[t + 1] - tr.positions[t]) - Vec3(1, 0, 0)).norm() < 1e-12);
        CHECK(tr.positions[t] == b.motion.at(0).apply(tr.local_point) + Vec3(t, 0, 0));
      }
    }
  }
  SUBCASE("no bodies") {
    Scene s;
    s.num_frames = frames;
    CHECK_THROWS_AS(sample_tracks(s, {cam}, 4, 1), ValidationError);
    CHECK_THROWS_AS(sample_tracks(s, {cam}, 0, 1), ValidationError);
  }
}

TEST_CASE("uniform area sampling on a unit sphere fills octants evenly") {
  RigidBody b = sphere(1, Vec3::Zero(), 1);
  std::mt19937_64 rng(9);
  const int n = 100000;
  int counts[8] = {};
  for (int i = 0; i < n; ++i) {
    const Vec3 p = sample_surface(b, rng);
    CHECK(std::abs(p.norm() - 1) < 1e-12);
    counts[(p.x() > 0) | ((p.y() > 0) << 1) | ((p.z() > 0) << 2)]++;
  }
  const double p = 1.0 / 8, sigma = std::sqrt(n * p * (1 - p));
  for (int c : counts) CHECK(std::abs(c - n * p) < 3 * sigma);
}

TEST_CASE("random scene labels respect any-view visibility") {
  SimConfig cfg;
  cfg.num_frames = 8;
  cfg.num_tracks = 40;
  cfg.seed = 5;
  GeneratedScene g = generate_scene(cfg, 0);

  SUBCASE("dropping a camera never turns a label on") {
    for (size_t drop = 0; drop < g.cameras.size(); ++drop) {
      std::vector<Camera> fewer;
      for (size_t v = 0; v < g.cameras.size(); ++v)
        if (v != drop) fewer.push_back(g.cameras[v]);
      for (const auto& tr : g.tracks) {
        for (int t = 0; t < cfg.num_frames; ++t) {
          const bool sub = point_visible(g.scene, fewer, t, tr.positions[t]);
          CHECK((!sub || tr.visible[t]));
        }
      }
    }
  }
  SUBCASE("query frame is visible and in the first half") {
    for (const auto& tr : g.tracks) {
      CHECK(tr.query_frame < cfg.num_frames / 2);
      CHECK(tr.visible[tr.query_frame] == 1);
    }
  }
  SUBCASE("rendered depth agrees with visible track depths") {
    int compared = 0, agree = 0;
    for (int t = 0; t < cfg.num_frames; ++t) {
      const auto views = render_views(g.scene, g.cameras, t);
      for (size_t v = 0; v < g.cameras.size(); ++v) {
        for (const auto& tr : g.tracks) {
          if (!point_visible_in(g.scene, g.cameras[v], t, tr.positions[t])) continue;
          const Projection p = project_point(g.cameras[v], tr.positions[t]);
          const int c = static_cast<int>(std::lround(p.pixel.x())), r = static_cast<int>(std::lround(p.pixel.y()));
          const int body = views[v].body_index[static_cast<size_t>(r) * cfg.width + c];
          // Near silhouettes the pixel center can land on another surface.
          if (body < 0 || g.scene.bodies[body].id != tr.body_id) continue;
          ++compared;
          // Pixels whose 3x3 neighbourhood leaves the body are silhouette
          // pixels where rounding to the pixel center is ill-conditioned.
          bool interior = true;
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
              const int rr = std::clamp(r + dr, 0, cfg.height - 1), cc = std::clamp(c + dc, 0, cfg.width - 1);
              interior &= views[v].body_index[static_cast<size_t>(rr) * cfg.width + cc] == body;
            }
          if (!interior) {
            --compared;
            continue;
          }
          // One pixel's surface-depth variation, floored at 1% of depth.
          double slack = 0.01 * p.depth;
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
              const int rr = std::clamp(r + dr, 0, cfg.height - 1), cc = std::clamp(c + dc, 0, cfg.width - 1);
              slack = std::max(slack, double(std::abs(views[v].depth.at(rr, cc) - views[v].depth.at(r, c))));
            }
          const double err = std::abs(views[v].depth.at(r, c) - p.depth);
          INFO("err " << err << " slack " << slack);
          CHECK(err <= slack);
          agree += err <= slack;
        }
      }
    }
    CHECK(compared > 100);
    CHECK(agree == compared);
  }
}

TEST_CASE("generate_dataset layout, determinism and regeneration") {
  SimConfig cfg;
  cfg.num_scenes = 2;
  cfg.num_views = 4;
  cfg.num_frames = 24;
  cfg.width = cfg.height = 32;
  cfg.num_tracks = 8;
  cfg.seed = 7;
  const fs::path a = temp_dir("ds_a"), b = temp_dir("ds_b");
  const std::string ma = generate_dataset(cfg, a, 1);
  const std::string mb = generate_dataset(cfg, b, 2);
  CHECK(ma == mb);
  size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    ++files;
    const fs::path other = b / fs::relative(entry.path(), a);
    REQUIRE(fs::exists(other));
    CHECK(read_file(entry.path()) == read_file(other));
  }
  CHECK(files == 1 + 2 * (4 + 4 * 24 * 2));

  SceneData s = load_scene(a / "scene_0001");
  CHECK(s.num_views() == 4);
  CHECK(s.num_frames() == 24);
  CHECK(s.rgb[3].size() == 24);
  CHECK(s.ground_truth.size() == 8);
  const GeneratedScene g = generate_scene(cfg, 1);
  for (int t : {0, 11, 23}) {
    const auto views = render_views(g.scene, g.cameras, t);
    for (int v = 0; v < 4; ++v) {
      CHECK(encode_mvd(views[v].depth) == encode_mvd(s.depth[v][t]));
      CHECK(views[v].rgb == s.rgb[v][t]);
    }
  }
  for (const auto& q : s.queries) {
    const auto& gt = s.ground_truth[q.track_id];
    CHECK((gt.positions[q.query_frame] - q.xyz).norm() < 1e-6);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("generate_dataset validation and IO errors") {
  SimConfig cfg;
  cfg.num_views = 9;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.num_views = 2;
  cfg.num_scenes = 1;
  cfg.num_frames = 2;
  cfg.width = cfg.height = 32;
  const fs::path blocker = temp_dir("blocker");
  write_file(blocker, std::string("not a directory"));
  CHECK_THROWS_AS(generate_dataset(cfg, blocker / "out"), IoError);
  fs::remove(blocker);
}

TEST_CASE("file formats round trip") {
  const fs::path dir = temp_dir("formats");
  SUBCASE("MVD1 is bit exact and validated") {
    DepthMap d(3, 5);
    for (size_t i = 0; i < d.values.size(); ++i) d.values[i] = i % 4 == 0 ? NAN : 0.1f * static_cast<float>(i);
    d.values[1] = 1e-41f;
    write_mvd(dir / "d.mvd", d);
    const auto bytes = read_file(dir / "d.mvd");
    CHECK(encode_mvd(read_mvd(dir / "d.mvd")) == bytes);
    CHECK(bytes.size() == 12 + 15 * 4);
    auto cut = bytes;
    cut.resize(20);
    try {
      decode_mvd(cut, "cut.mvd");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
    }
  }
  SUBCASE("PPM") {
    RgbImage img(2, 3);
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<uint8_t>(i * 13);
    write_ppm(dir / "i.ppm", img);
    CHECK(read_ppm(dir / "i.ppm") == img);
  }
  SUBCASE("cameras static and per-frame") {
    ViewCameras a{0, 32, 32, intrinsics(30, 31, 15.5, 15.5), {look_at(Vec3(3, 0, 1), Vec3::Zero())}};
    ViewCameras b{1, 32, 32, intrinsics(30, 30, 15.5, 15.5),
                  {look_at(Vec3(0, 3, 1), Vec3::Zero()), look_at(Vec3(0, 3.1, 1), Vec3::Zero())}};
    write_file(dir / "cameras.json", cameras_to_json({a, b}));
    const auto back = read_cameras(dir / "cameras.json");
    REQUIRE(back.size() == 2);
    CHECK(back[0].is_static());
    CHECK(back[1].E.size() == 2);
    CHECK(back[0].K == a.K);
    CHECK(back[1].E[1] == b.E[1]);
  }
  SUBCASE("track CSVs") {
    TrackRecord tr{3, 1, {Vec3(0.1, 0.2, 0.3), Vec3(1.0 / 3, -2, 5)}, {1, 0}, {0.75, 0.125}};
    write_pred_tracks_csv(dir / "p.csv", {tr});
    const auto back = read_tracks_csv(dir / "p.csv");
    REQUIRE(back.size() == 1);
    CHECK(back[0].track_id == 3);
    CHECK(back[0].visible == tr.visible);
    CHECK(back[0].confidence == tr.confidence);
    CHECK(std::abs(back[0].positions[1].x() - 1.0 / 3) < 1e-8);
    write_file(dir / "bad.csv", std::string("track_id,t,x,y,z,visible\n0,0,1,2\n"));
    CHECK_THROWS_AS(read_tracks_csv(dir / "bad.csv"), IoError);
  }
  SUBCASE("missing cameras.json names the path") {
    fs::create_directories(dir / "scene");
    try {
      load_scene(dir / "scene");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("manifest.json") != std::string::npos);
    }
  }
  fs::remove_all(dir);
}
