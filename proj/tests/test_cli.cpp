#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "doctest.h"
#include "fixtures.hpp"
#include "mvt/training.hpp"

using namespace mvt;
using namespace mvt::testing;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Runs the CLI with the working directory set to `dir`.
Result run(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" MVTRACK_BIN "' " + args + " > cli.out 2> cli.err";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(dir / "cli.out");
  r.err = slurp(dir / "cli.err");
  return r;
}

// All regular files under `root` with their bytes, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

const fs::path& workspace() {
  static const fs::path dir = [] {
    const fs::path d = temp_dir("cli");
    const Result r = run(d, "simulate --out data --scenes 2 --views 3 --frames 6 --width 32 --height 32 --tracks 4 --seed 7");
    REQUIRE(r.code == 0);
    TrackerModel model(tiny_tracker(4, 2), 3);
    randomize_heads(model, 3);
    save_model(model, d / "model.bin");
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("simulate writes scenes deterministically") {
  const fs::path& w = workspace();
  CHECK(fs::exists(w / "data" / "scene_0000" / "manifest.json"));
  CHECK(fs::exists(w / "data" / "scene_0001" / "cameras.json"));
  CHECK(fs::exists(w / "data.run.json"));
  const fs::path d = temp_dir("cli_sim");
  const std::string args = "simulate --out data --scenes 2 --views 3 --frames 6 --width 32 --height 32 --tracks 4 --seed 7";
  REQUIRE(run(d, args).code == 0);
  CHECK(tree(d / "data") == tree(w / "data"));

  const Result bad = run(d, "simulate --out more --scenes 1 --views 9");
  CHECK(bad.code == 1);
  CHECK(bad.err.find("view") != std::string::npos);
  fs::remove_all(d);
}

TEST_CASE("run manifest records the command") {
  const auto m = nlohmann::json::parse(slurp(workspace() / "data.run.json"));
  CHECK(m["command"] == "simulate");
  CHECK(m["seed"] == 7);
  CHECK(m["config_hash"].get<std::string>().size() == 16);
  CHECK(m.contains("timings_s"));
  CHECK(m.contains("version"));
}

TEST_CASE("track output is stable under equivalent flags") {
  const fs::path& w = workspace();
  REQUIRE(run(w, "track --scene data/scene_0000 --checkpoint model.bin --out a.csv").code == 0);
  REQUIRE(run(w, "track --scene data/scene_0000 --checkpoint model.bin --out b.csv --views 0,1,2").code == 0);
  REQUIRE(run(w, "track --scene data/scene_0000 --checkpoint model.bin --out c.csv --depth-noise 0").code == 0);
  CHECK(slurp(w / "a.csv") == slurp(w / "b.csv"));
  CHECK(slurp(w / "a.csv") == slurp(w / "c.csv"));
  CHECK(slurp(w / "a.csv").rfind("track_id,t,x,y,z,visible,confidence\n", 0) == 0);
  const auto m = nlohmann::json::parse(slurp(w / "a.csv.run.json"));
  CHECK(m["command"] == "track");

  REQUIRE(run(w, "track --scene data/scene_0000 --checkpoint model.bin --out d.csv --depth-noise 0.05").code == 0);
  CHECK(slurp(w / "a.csv") != slurp(w / "d.csv"));
  CHECK(run(w, "track --scene data/scene_0000 --checkpoint model.bin --out e.csv --views 5").code == 1);
}

TEST_CASE("queries outside the video are listed") {
  const fs::path& w = workspace();
  std::ofstream(w / "bad_queries.csv") << "track_id,t_q,x,y,z\n1,0,0,0,0\n2,9,0,0,0\n3,-1,0,0,0\n";
  const Result r = run(w, "track --scene data/scene_0000 --checkpoint model.bin --queries bad_queries.csv --out q.csv");
  CHECK(r.code == 1);
  CHECK(r.err.find("track 2") != std::string::npos);
  CHECK(r.err.find("track 3") != std::string::npos);
}

TEST_CASE("eval of ground truth against itself is perfect") {
  const fs::path& w = workspace();
  const Result r = run(w, "eval --pred data/scene_0000/gt_tracks.csv --gt data/scene_0000/gt_tracks.csv "
                          "--queries data/scene_0000/queries.csv --json self.json --csv self.csv");
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(slurp(w / "self.json"));
  CHECK(j["aggregates"]["dataset"]["mte"].get<double>() == 0);
  CHECK(j["aggregates"]["dataset"]["oa"].get<double>() == 1);
  CHECK(j["aggregates"]["dataset"]["delta_avg"].get<double>() == 1);
  CHECK(j["aggregates"]["dataset"]["aj"].get<double>() == 1);
  CHECK(slurp(w / "self.csv").rfind("scene,track,metric,value\n", 0) == 0);

  // Dataset mode with a directory of predictions.
  fs::create_directories(w / "preds");
  for (const char* s : {"scene_0000", "scene_0001"}) {
    REQUIRE(run(w, std::string("track --scene data/") + s + " --checkpoint model.bin --out preds/" + s + ".csv").code == 0);
  }
  const Result d = run(w, "eval --data data --pred-dir preds --json ds.json");
  REQUIRE(d.code == 0);
  const auto dj = nlohmann::json::parse(slurp(w / "ds.json"));
  CHECK(dj["dataset"].size() == 2);
  CHECK(dj["thresholds"][0].get<double>() == doctest::Approx(0.02));
}

TEST_CASE("missing files are IO errors naming the path") {
  const fs::path& w = workspace();
  const fs::path broken = w / "broken";
  fs::remove_all(broken);
  fs::copy(w / "data" / "scene_0000", broken, fs::copy_options::recursive);
  fs::remove(broken / "cameras.json");
  const Result t = run(w, "track --scene broken --checkpoint model.bin --out x.csv");
  CHECK(t.code == 2);
  CHECK(t.err.find("cameras.json") != std::string::npos);
  const Result c = run(w, "track --scene data/scene_0000 --checkpoint nowhere.bin --out x.csv");
  CHECK(c.code == 2);
  CHECK(c.err.find("nowhere.bin") != std::string::npos);

  fs::create_directories(w / "broken_set");
  fs::remove_all(w / "broken_set" / "scene_0000");
  fs::copy(broken, w / "broken_set" / "scene_0000", fs::copy_options::recursive);
  const Result tr = run(w, "train --data broken_set --out never.bin --steps 1");
  CHECK(tr.code == 2);
  CHECK(tr.err.find("cameras.json") != std::string::npos);
}

TEST_CASE("non-finite weights exit with the divergence code") {
  const fs::path& w = workspace();
  TrackerModel model(tiny_tracker(4, 2), 4);
  for (auto& p : model.params().items()) {
    if (p.name.rfind("refiner.delta_pos", 0) == 0) {
      for (Real& v : p.tensor.data()) v = std::numeric_limits<Real>::infinity();
    }
  }
  save_model(model, w / "nan.bin");
  const Result r = run(w, "track --scene data/scene_0000 --checkpoint nan.bin --out n.csv");
  CHECK(r.code == 3);
  CHECK(r.err.find("iteration") != std::string::npos);
}

TEST_CASE("train, resume and reuse the checkpoint") {
  const fs::path& w = workspace();
  TrainingConfig c;
  c.model = tiny_tracker(4, 2);
  c.augment.max_tracks = 2;
  c.steps = 6;
  c.warmup_steps = 2;
  c.checkpoint_every = 0;
  c.log_every = 1;
  write_file(w / "train.json", training_config_to_json(c).dump(2));

  REQUIRE(run(w, "train --data data --config train.json --out full.bin --quiet").code == 0);
  REQUIRE(run(w, "train --data data --config train.json --out part.bin --stop-after 3 --quiet").code == 0);
  const std::string partial = slurp(w / "part.bin.log.csv");
  CHECK(std::count(partial.begin(), partial.end(), '\n') == 4);
  REQUIRE(run(w, "train --data data --config train.json --out part.bin --resume --quiet").code == 0);
  CHECK(slurp(w / "part.bin.log.csv") == slurp(w / "full.bin.log.csv"));
  CHECK(slurp(w / "part.bin") == slurp(w / "full.bin"));
  CHECK(nlohmann::json::parse(slurp(w / "full.bin.run.json"))["command"] == "train");

  REQUIRE(run(w, "track --scene data/scene_0001 --checkpoint full.bin --out trained.csv").code == 0);
  CHECK(fs::file_size(w / "trained.csv") > 0);
}

TEST_CASE("bench reports throughput") {
  const fs::path& w = workspace();
  const Result r = run(w, "bench --scene data/scene_0000 --checkpoint model.bin --out bench.json --repeat 2");
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(slurp(w / "bench.json"));
  CHECK(j["frames"] == 6);
  CHECK(j["wall_time_s"].get<double>() > 0);
  CHECK(j["effective_fps"].get<double>() > 0);
  CHECK(j["raw_fps"].get<double>() >= j["effective_fps"].get<double>());
  CHECK(j.contains("load_time_s"));
  const Result half = run(w, "bench --scene data/scene_0000 --checkpoint model.bin --frames 4 --out bench4.json");
  REQUIRE(half.code == 0);
  CHECK(nlohmann::json::parse(slurp(w / "bench4.json"))["frames"] == 4);
}

TEST_CASE("bench throughput is steady when the clip doubles") {
  const fs::path& w = workspace();
  REQUIRE(run(w, "simulate --out long --scenes 1 --views 4 --frames 24 --width 64 --height 64 --tracks 16 --seed 9")
              .code == 0);
  // Interleaved rounds so a burst of outside load cannot land on one length only.
  double fps[2] = {0, 0};
  for (int round = 0; round < 2; ++round) {
    for (int i = 0; i < 2; ++i) {
      const int frames = 12 << i;
      const std::string out = "bench_long" + std::to_string(frames) + ".json";
      REQUIRE(run(w, "bench --scene long/scene_0000 --checkpoint model.bin --repeat 5 --frames " +
                         std::to_string(frames) + " --out " + out)
                  .code == 0);
      fps[i] = std::max(fps[i], nlohmann::json::parse(slurp(w / out))["raw_fps"].get<double>());
    }
  }
  INFO("raw fps " << fps[0] << " vs " << fps[1]);
  CHECK(std::abs(fps[1] - fps[0]) / fps[0] < 0.2);
}

TEST_CASE("usage errors exit with the validation code") {
  const fs::path& w = workspace();
  CHECK(run(w, "").code == 1);
  CHECK(run(w, "track --scene data/scene_0000").code == 1);
  CHECK(run(w, "frobnicate").code == 1);
  CHECK(run(w, "--version").code == 0);
}
