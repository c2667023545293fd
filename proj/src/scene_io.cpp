#include "mvt/scene_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "mvt/errors.hpp"

namespace mvt {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

using json = nlohmann::json;

namespace {

void put_u32(std::vector<char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

uint32_t get_u32(const std::vector<char>& b, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(b[off + i])) << (8 * i);
  return v;
}

json parse_json_file(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": malformed JSON at byte offset " + std::to_string(e.byte) + ": " + e.what());
  }
}

template <typename T>
T json_get(const json& j, const char* key, const fs::path& path) {
  if (!j.contains(key)) throw IoError(path.string() + ": missing field \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad field \"" + key + "\": " + e.what());
  }
}

std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const fs::path& path, size_t line) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw IoError(path.string() + ":" + std::to_string(line) + ": not a number: \"" + s + "\"");
  }
  return v;
}

int parse_int(const std::string& s, const fs::path& path, size_t line) {
  const double v = parse_number(s, path, line);
  if (v != std::floor(v)) throw IoError(path.string() + ":" + std::to_string(line) + ": expected an integer");
  return static_cast<int>(v);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::vector<std::string>& header_prefix,
                                               std::vector<std::string>* header_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open");
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  if (header.size() < header_prefix.size() ||
      !std::equal(header_prefix.begin(), header_prefix.end(), header.begin())) {
    throw IoError(path.string() + ":1: unexpected header \"" + line + "\"");
  }
  if (header_out) *header_out = header;
  std::vector<std::vector<std::string>> rows;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                    " columns, got " + std::to_string(cells.size()));
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

json mat_to_json(const double* data, int n) {
  json a = json::array();
  for (int i = 0; i < n; ++i) a.push_back(data[i]);
  return a;
}

template <int R>
Eigen::Matrix<double, R, R> json_to_mat(const json& a, const fs::path& path) {
  if (!a.is_array() || a.size() != R * R) {
    throw IoError(path.string() + ": expected " + std::to_string(R * R) + " numbers");
  }
  Eigen::Matrix<double, R, R> m;
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < R; ++c) m(r, c) = a[r * R + c].get<double>();
  return m;
}

}  // namespace

Camera ViewCameras::at(int frame) const {
  Camera cam;
  cam.K = K;
  cam.width = width;
  cam.height = height;
  cam.view_id = view_id;
  if (E.empty()) throw ValidationError("camera " + std::to_string(view_id) + " has no extrinsics");
  if (is_static()) {
    cam.E = E[0];
  } else {
    if (frame < 0 || frame >= static_cast<int>(E.size())) {
      throw ValidationError("camera " + std::to_string(view_id) + " has no extrinsics for frame " +
                            std::to_string(frame));
    }
    cam.E = E[frame];
  }
  return cam;
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open");
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::vector<char>& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

void write_file(const fs::path& path, const std::string& text) {
  write_file(path, std::vector<char>(text.begin(), text.end()));
}

void write_ppm(const fs::path& path, const RgbImage& image) {
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<char> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), image.data.begin(), image.data.end());
  write_file(path, bytes);
}

RgbImage read_ppm(const fs::path& path) {
  const auto bytes = read_file(path);
  size_t pos = 0;
  auto token = [&]() {
    // Whitespace and '#' comments separate header tokens.
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw IoError(path.string() + ": truncated PPM header at byte offset " + std::to_string(pos));
    return std::string(bytes.data() + start, pos - start);
  };
  if (token() != "P6") throw IoError(path.string() + ": not a binary PPM (P6) at byte offset 0");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::logic_error&) {
    throw IoError(path.string() + ": malformed PPM header near byte offset " + std::to_string(pos));
  }
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw IoError(path.string() + ": unsupported PPM dimensions or maxval near byte offset " + std::to_string(pos));
  }
  ++pos;  // single whitespace before raster
  const size_t need = static_cast<size_t>(w) * h * 3;
  if (bytes.size() < pos + need) {
    throw IoError(path.string() + ": truncated PPM raster at byte offset " + std::to_string(bytes.size()));
  }
  RgbImage img(h, w);
  std::memcpy(img.data.data(), bytes.data() + pos, need);
  return img;
}

std::vector<char> encode_mvd(const DepthMap& depth) {
  std::vector<char> out = {'M', 'V', 'D', '1'};
  put_u32(out, static_cast<uint32_t>(depth.height));
  put_u32(out, static_cast<uint32_t>(depth.width));
  const size_t off = out.size();
  out.resize(off + depth.values.size() * 4);
  std::memcpy(out.data() + off, depth.values.data(), depth.values.size() * 4);
  return out;
}

DepthMap decode_mvd(const std::vector<char>& bytes, const std::string& origin) {
  if (bytes.size() < 12) throw IoError(origin + ": truncated MVD1 header at byte offset " + std::to_string(bytes.size()));
  if (std::memcmp(bytes.data(), "MVD1", 4) != 0) throw IoError(origin + ": bad MVD1 magic at byte offset 0");
  const uint32_t h = get_u32(bytes, 4), w = get_u32(bytes, 8);
  const size_t need = 12 + static_cast<size_t>(h) * w * 4;
  if (bytes.size() < need) throw IoError(origin + ": truncated MVD1 data at byte offset " + std::to_string(bytes.size()));
  if (bytes.size() > need) throw IoError(origin + ": trailing bytes at byte offset " + std::to_string(need));
  DepthMap d;
  d.height = static_cast<int>(h);
  d.width = static_cast<int>(w);
  d.values.resize(static_cast<size_t>(h) * w);
  std::memcpy(d.values.data(), bytes.data() + 12, d.values.size() * 4);
  return d;
}

void write_mvd(const fs::path& path, const DepthMap& depth) { write_file(path, encode_mvd(depth)); }

DepthMap read_mvd(const fs::path& path) { return decode_mvd(read_file(path), path.string()); }

std::string cameras_to_json(const std::vector<ViewCameras>& cams) {
  json arr = json::array();
  for (const auto& c : cams) {
    json j;
    j["view_id"] = c.view_id;
    j["width"] = c.width;
    j["height"] = c.height;
    const Eigen::Matrix<double, 3, 3, Eigen::RowMajor> K = c.K;
    j["K"] = mat_to_json(K.data(), 9);
    if (c.is_static()) {
      const Eigen::Matrix<double, 4, 4, Eigen::RowMajor> E = c.E[0];
      j["E"] = mat_to_json(E.data(), 16);
    } else {
      json per = json::array();
      for (const auto& e : c.E) {
        const Eigen::Matrix<double, 4, 4, Eigen::RowMajor> E = e;
        per.push_back(mat_to_json(E.data(), 16));
      }
      j["E_per_frame"] = per;
    }
    arr.push_back(j);
  }
  return arr.dump(2) + "\n";
}

std::vector<ViewCameras> read_cameras(const fs::path& path) {
  const json arr = parse_json_file(path);
  if (!arr.is_array() || arr.empty()) throw IoError(path.string() + ": expected a non-empty array of views");
  std::vector<ViewCameras> out;
  for (const auto& j : arr) {
    ViewCameras c;
    c.view_id = json_get<int>(j, "view_id", path);
    c.width = j.value("width", 0);
    c.height = j.value("height", 0);
    try {
      c.K = json_to_mat<3>(j.at("K"), path);
      if (j.contains("E")) {
        c.E.push_back(json_to_mat<4>(j.at("E"), path));
      } else if (j.contains("E_per_frame")) {
        for (const auto& e : j.at("E_per_frame")) c.E.push_back(json_to_mat<4>(e, path));
      } else {
        throw IoError(path.string() + ": view " + std::to_string(c.view_id) + " has neither E nor E_per_frame");
      }
    } catch (const json::exception& e) {
      throw IoError(path.string() + ": view " + std::to_string(c.view_id) + ": " + e.what());
    }
    for (size_t f = 0; f < c.E.size(); ++f) {
      try {
        validate_camera(c.at(static_cast<int>(f)));
      } catch (const ValidationError& e) {
        throw IoError(path.string() + ": " + e.what());
      }
    }
    out.push_back(std::move(c));
  }
  return out;
}

std::string manifest_to_json(const SceneManifest& m) {
  json j;
  j["scene_id"] = m.scene_id;
  j["units"] = m.units;
  j["num_views"] = m.num_views;
  j["num_frames"] = m.num_frames;
  j["width"] = m.width;
  j["height"] = m.height;
  j["seed"] = m.seed;
  j["num_tracks"] = m.num_tracks;
  j["threshold_scale"] = m.threshold_scale;
  j["depth_noise_unit"] = m.depth_noise_unit;
  return j.dump(2) + "\n";
}

SceneManifest read_manifest(const fs::path& path) {
  const json j = parse_json_file(path);
  SceneManifest m;
  m.scene_id = j.value("scene_id", path.parent_path().filename().string());
  m.units = j.value("units", std::string("meters"));
  m.num_views = json_get<int>(j, "num_views", path);
  m.num_frames = json_get<int>(j, "num_frames", path);
  m.width = json_get<int>(j, "width", path);
  m.height = json_get<int>(j, "height", path);
  m.seed = j.value("seed", uint64_t{0});
  m.num_tracks = j.value("num_tracks", 0);
  m.threshold_scale = j.value("threshold_scale", 1.0);
  m.depth_noise_unit = j.value("depth_noise_unit", 0.01);
  if (m.num_views < 1 || m.num_frames < 1 || m.width < 1 || m.height < 1) {
    throw IoError(path.string() + ": counts and resolution must be positive");
  }
  return m;
}

void write_queries_csv(const fs::path& path, const std::vector<Query>& queries) {
  std::string s = "track_id,t_q,x,y,z\n";
  for (const auto& q : queries) {
    s += std::to_string(q.track_id) + "," + std::to_string(q.query_frame) + "," + fmt9(q.xyz.x()) + "," +
         fmt9(q.xyz.y()) + "," + fmt9(q.xyz.z()) + "\n";
  }
  write_file(path, s);
}

std::vector<Query> read_queries_csv(const fs::path& path) {
  std::vector<Query> out;
  size_t line = 1;
  for (const auto& r : read_csv(path, {"track_id", "t_q", "x", "y", "z"})) {
    ++line;
    Query q;
    q.track_id = parse_int(r[0], path, line);
    q.query_frame = parse_int(r[1], path, line);
    q.xyz = Vec3(parse_number(r[2], path, line), parse_number(r[3], path, line), parse_number(r[4], path, line));
    out.push_back(q);
  }
  return out;
}

void write_gt_tracks_csv(const fs::path& path, const std::vector<TrackRecord>& tracks) {
  std::string s = "track_id,t,x,y,z,visible\n";
  for (const auto& tr : tracks) {
    for (size_t t = 0; t < tr.positions.size(); ++t) {
      const Vec3& p = tr.positions[t];
      s += std::to_string(tr.track_id) + "," + std::to_string(t) + "," + fmt9(p.x()) + "," + fmt9(p.y()) + "," +
           fmt9(p.z()) + "," + (tr.visible[t] ? "1" : "0") + "\n";
    }
  }
  write_file(path, s);
}

void write_pred_tracks_csv(const fs::path& path, const std::vector<TrackRecord>& tracks) {
  std::string s = "track_id,t,x,y,z,visible,confidence\n";
  char conf[32];
  for (const auto& tr : tracks) {
    for (size_t t = 0; t < tr.positions.size(); ++t) {
      const Vec3& p = tr.positions[t];
      std::snprintf(conf, sizeof(conf), "%.6g", t < tr.confidence.size() ? tr.confidence[t] : 0.0);
      s += std::to_string(tr.track_id) + "," + std::to_string(t) + "," + fmt9(p.x()) + "," + fmt9(p.y()) + "," +
           fmt9(p.z()) + "," + (tr.visible[t] ? "1" : "0") + "," + conf + "\n";
    }
  }
  write_file(path, s);
}

std::vector<TrackRecord> read_tracks_csv(const fs::path& path) {
  std::vector<std::string> header;
  const auto rows = read_csv(path, {"track_id", "t", "x", "y", "z", "visible"}, &header);
  const bool has_conf = header.size() > 6 && header[6] == "confidence";
  std::map<int, std::map<int, std::pair<Vec3, std::pair<uint8_t, double>>>> by_track;
  size_t line = 1;
  for (const auto& r : rows) {
    ++line;
    const int id = parse_int(r[0], path, line);
    const int t = parse_int(r[1], path, line);
    if (t < 0) throw IoError(path.string() + ":" + std::to_string(line) + ": negative frame index");
    const Vec3 p(parse_number(r[2], path, line), parse_number(r[3], path, line), parse_number(r[4], path, line));
    const int vis = parse_int(r[5], path, line);
    if (vis != 0 && vis != 1) throw IoError(path.string() + ":" + std::to_string(line) + ": visible must be 0 or 1");
    const double conf = has_conf ? parse_number(r[6], path, line) : 0.0;
    if (!by_track[id].emplace(t, std::make_pair(p, std::make_pair(static_cast<uint8_t>(vis), conf))).second) {
      throw IoError(path.string() + ":" + std::to_string(line) + ": duplicate row for track " + std::to_string(id) +
                    " frame " + std::to_string(t));
    }
  }
  std::vector<TrackRecord> out;
  for (const auto& [id, frames] : by_track) {
    TrackRecord tr;
    tr.track_id = id;
    const int n = frames.rbegin()->first + 1;
    if (static_cast<int>(frames.size()) != n) {
      throw IoError(path.string() + ": track " + std::to_string(id) + " is missing frames");
    }
    for (const auto& [t, row] : frames) {
      tr.positions.push_back(row.first);
      tr.visible.push_back(row.second.first);
      if (has_conf) tr.confidence.push_back(row.second.second);
    }
    out.push_back(std::move(tr));
  }
  return out;
}

fs::path rgb_path(const fs::path& scene_dir, int view, int frame) {
  return scene_dir / "rgb" / ("view" + std::to_string(view)) / ("frame" + std::to_string(frame) + ".ppm");
}

fs::path depth_path(const fs::path& scene_dir, int view, int frame, const std::string& depth_dir) {
  return scene_dir / depth_dir / ("view" + std::to_string(view)) / ("frame" + std::to_string(frame) + ".mvd");
}

SceneData load_scene(const fs::path& dir, const LoadOptions& options) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + ": scene directory not found");
  SceneData s;
  s.dir = dir;
  s.manifest = read_manifest(dir / "manifest.json");
  s.cameras = read_cameras(dir / "cameras.json");
  if (static_cast<int>(s.cameras.size()) != s.manifest.num_views) {
    throw IoError((dir / "cameras.json").string() + ": " + std::to_string(s.cameras.size()) +
                  " views but manifest declares " + std::to_string(s.manifest.num_views));
  }
  for (auto& c : s.cameras) {
    if (c.width == 0) c.width = s.manifest.width;
    if (c.height == 0) c.height = s.manifest.height;
    if (!c.is_static() && static_cast<int>(c.E.size()) != s.manifest.num_frames) {
      throw IoError((dir / "cameras.json").string() + ": view " + std::to_string(c.view_id) +
                    " E_per_frame length does not match num_frames");
    }
  }
  const int V = s.num_views(), T = s.manifest.num_frames;
  if (options.images) {
    s.rgb.assign(V, {});
    for (int v = 0; v < V; ++v) {
      for (int t = 0; t < T; ++t) {
        const fs::path p = rgb_path(dir, s.cameras[v].view_id, t);
        RgbImage img = read_ppm(p);
        if (img.width != s.cameras[v].width || img.height != s.cameras[v].height) {
          throw IoError(p.string() + ": image size does not match camera");
        }
        s.rgb[v].push_back(std::move(img));
      }
    }
  }
  if (options.depth) {
    s.depth.assign(V, {});
    for (int v = 0; v < V; ++v) {
      for (int t = 0; t < T; ++t) {
        const fs::path p = depth_path(dir, s.cameras[v].view_id, t, options.depth_dir);
        DepthMap d = read_mvd(p);
        if (d.width != s.cameras[v].width || d.height != s.cameras[v].height) {
          throw IoError(p.string() + ": depth size does not match camera");
        }
        s.depth[v].push_back(std::move(d));
      }
    }
  }
  s.queries = read_queries_csv(dir / "queries.csv");
  if (options.ground_truth && fs::exists(dir / "gt_tracks.csv")) {
    s.ground_truth = read_tracks_csv(dir / "gt_tracks.csv");
    std::map<int, int> tq;
    for (const auto& q : s.queries) tq[q.track_id] = q.query_frame;
    for (auto& tr : s.ground_truth) {
      if (static_cast<int>(tr.positions.size()) != T) {
        throw IoError((dir / "gt_tracks.csv").string() + ": track " + std::to_string(tr.track_id) + " has " +
                      std::to_string(tr.positions.size()) + " frames, expected " + std::to_string(T));
      }
      if (auto it = tq.find(tr.track_id); it != tq.end()) tr.query_frame = it->second;
    }
  }
  return s;
}

std::vector<fs::path> dataset_scene_dirs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + ": dataset directory not found");
  std::vector<fs::path> out;
  const fs::path index = dir / "dataset.json";
  if (fs::exists(index)) {
    const auto bytes = read_file(index);
    try {
      const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
      for (const auto& name : j.at("scenes")) out.push_back(dir / name.get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(index.string() + ": " + e.what());
    }
    return out;
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError(dir.string() + ": no scene directories found");
  return out;
}

std::vector<SceneData> load_dataset(const fs::path& dir, const LoadOptions& options) {
  std::vector<SceneData> out;
  for (const auto& d : dataset_scene_dirs(dir)) out.push_back(load_scene(d, options));
  return out;
}

}  // namespace mvt
