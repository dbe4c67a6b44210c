// SPDX-License-Identifier: Apache-2.0
//
// Clip manifests: a JSON index over the on-disk layout
//   <root>/<clip_id>/{frames,alpha,mask}/%05d.png
// Frames are 8-bit RGB, alpha mattes 16-bit gray, masks 8-bit gray {0,255}.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "memprop/core_types.hpp"

namespace memprop {

inline constexpr const char* kManifestVersion = "memprop-matte-manifest-v1";

struct ClipManifest {
  std::string clip_id;
  Split split = Split::Train;
  DataKind data_kind = DataKind::Matting;
  int frame_count = 0;
  int height = 0;
  int width = 0;
  // Directories relative to the manifest root; empty when the stream is absent.
  std::string frames_dir;
  std::string alpha_dir;
  std::string mask_dir;
};

struct Manifest {
  std::uint64_t seed = 0;
  std::filesystem::path root;  // directory holding manifest.json
  std::vector<ClipManifest> clips;
  nlohmann::json provenance = nlohmann::json::object();

  const ClipManifest& find(const std::string& clip_id) const;
  std::vector<const ClipManifest*> select(std::optional<Split> split, std::optional<DataKind> kind) const;
};

/// A clip with its ground truth loaded into memory.
struct LoadedClip {
  ClipManifest meta;
  VideoClip clip;
  std::optional<AlphaSequence> alpha;
  SegMaskSequence mask;
};

nlohmann::json to_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& root);

void save_manifest(const Manifest& m, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);

/// Throws InputError if any referenced frame is missing or stream lengths differ.
void validate_manifest_files(const Manifest& m);

LoadedClip load_clip(const Manifest& m, const ClipManifest& entry);

/// Image-sequence helpers for a single stream directory.
Tensor read_sequence(const std::filesystem::path& dir, int count);
int count_frames(const std::filesystem::path& dir);
void write_sequence(const std::filesystem::path& dir, const Tensor& seq, int bit_depth);

}  // namespace memprop
