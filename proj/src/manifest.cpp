// SPDX-License-Identifier: Apache-2.0
#include "memprop/manifest.hpp"

#include <fstream>

#include "memprop/image_io.hpp"

namespace memprop {

namespace fs = std::filesystem;
using nlohmann::json;

const ClipManifest& Manifest::find(const std::string& clip_id) const {
  for (const auto& c : clips)
    if (c.clip_id == clip_id) return c;
  throw InputError("clip '" + clip_id + "' not in manifest");
}

std::vector<const ClipManifest*> Manifest::select(std::optional<Split> split, std::optional<DataKind> kind) const {
  std::vector<const ClipManifest*> out;
  for (const auto& c : clips) {
    if (split && c.split != *split) continue;
    if (kind && c.data_kind != *kind) continue;
    out.push_back(&c);
  }
  return out;
}

json to_json(const Manifest& m) {
  json clips = json::array();
  for (const auto& c : m.clips) {
    json streams = json::object();
    streams["frames"] = c.frames_dir;
    if (!c.alpha_dir.empty()) streams["alpha"] = c.alpha_dir;
    if (!c.mask_dir.empty()) streams["mask"] = c.mask_dir;
    clips.push_back({{"clip_id", c.clip_id},
                     {"split", std::string(to_string(c.split))},
                     {"data_kind", std::string(to_string(c.data_kind))},
                     {"frame_count", c.frame_count},
                     {"height", c.height},
                     {"width", c.width},
                     {"streams", streams}});
  }
  return {{"version", kManifestVersion}, {"seed", m.seed}, {"provenance", m.provenance}, {"clips", clips}};
}

namespace {

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + "." + key + ": missing field");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

}  // namespace

Manifest manifest_from_json(const json& j, const fs::path& root) {
  if (!j.is_object()) throw ConfigError("manifest: expected an object");
  const auto version = field<std::string>(j, "version", "manifest");
  if (version != kManifestVersion) throw ConfigError("manifest.version: unsupported '" + version + "'");
  Manifest m;
  m.root = root;
  m.seed = field<std::uint64_t>(j, "seed", "manifest");
  if (j.contains("provenance")) m.provenance = j["provenance"];
  if (!j.contains("clips") || !j["clips"].is_array()) throw ConfigError("manifest.clips: missing array");
  for (std::size_t i = 0; i < j["clips"].size(); ++i) {
    const json& cj = j["clips"][i];
    const std::string where = "manifest.clips[" + std::to_string(i) + "]";
    ClipManifest c;
    c.clip_id = field<std::string>(cj, "clip_id", where);
    c.split = parse_split(field<std::string>(cj, "split", where));
    c.data_kind = parse_data_kind(field<std::string>(cj, "data_kind", where));
    c.frame_count = field<int>(cj, "frame_count", where);
    c.height = field<int>(cj, "height", where);
    c.width = field<int>(cj, "width", where);
    if (!cj.contains("streams")) throw ConfigError(where + ".streams: missing field");
    const json& s = cj["streams"];
    c.frames_dir = field<std::string>(s, "frames", where + ".streams");
    if (s.contains("alpha")) c.alpha_dir = s["alpha"].get<std::string>();
    if (s.contains("mask")) c.mask_dir = s["mask"].get<std::string>();
    if (c.data_kind == DataKind::Matting && c.alpha_dir.empty()) throw ConfigError(where + ".streams.alpha: required for matting clips");
    if (c.data_kind == DataKind::Segmentation && c.mask_dir.empty()) throw ConfigError(where + ".streams.mask: required for segmentation clips");
    m.clips.push_back(std::move(c));
  }
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest " + path.string());
  os << to_json(m).dump(2) << '\n';
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("manifest " + path.string() + ": " + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

int count_frames(const fs::path& dir) {
  int n = 0;
  while (fs::exists(dir / frame_filename(n))) ++n;
  return n;
}

void validate_manifest_files(const Manifest& m) {
  for (const auto& c : m.clips) {
    for (const std::string* s : {&c.frames_dir, &c.alpha_dir, &c.mask_dir}) {
      if (s->empty()) continue;
      const int n = count_frames(m.root / *s);
      if (n != c.frame_count) {
        throw InputError("clip " + c.clip_id + ": stream '" + *s + "' has " + std::to_string(n) + " frames, manifest says " +
                         std::to_string(c.frame_count));
      }
    }
  }
}

Tensor read_sequence(const fs::path& dir, int count) {
  if (count < 1) throw InputError("empty sequence at " + dir.string());
  std::vector<Tensor> frames;
  frames.reserve(static_cast<std::size_t>(count));
  for (int t = 0; t < count; ++t) {
    const fs::path p = dir / frame_filename(t);
    if (!fs::exists(p)) throw InputError("missing frame " + p.string());
    frames.push_back(read_png(p));
    if (!frames.back().same_shape(frames.front())) throw InputError("frame size changes within " + dir.string());
  }
  return concat0(frames);
}

void write_sequence(const fs::path& dir, const Tensor& seq, int bit_depth) {
  fs::create_directories(dir);
  for (int t = 0; t < seq.dim(0); ++t) write_png(dir / frame_filename(t), seq.slice0(t), bit_depth);
}

LoadedClip load_clip(const Manifest& m, const ClipManifest& entry) {
  LoadedClip out;
  out.meta = entry;
  out.clip.frames = read_sequence(m.root / entry.frames_dir, entry.frame_count);
  if (out.clip.frames.dim(1) != 3) throw InputError("clip " + entry.clip_id + ": frames must be RGB");
  if (!entry.alpha_dir.empty()) {
    out.alpha = AlphaSequence{read_sequence(m.root / entry.alpha_dir, entry.frame_count)};
    out.alpha->validate_against(out.clip);
  }
  if (!entry.mask_dir.empty()) {
    out.mask.mask = binarize_alpha(read_sequence(m.root / entry.mask_dir, entry.frame_count), 128);
  } else {
    out.mask.mask = binarize_alpha(out.alpha->alpha, 128);
  }
  return out;
}

}  // namespace memprop
