#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ultravar/rng.hpp"
#include "ultravar/tensor.hpp"

namespace uvar {

struct SynthConfig {
  std::size_t side = 32;
  std::size_t n_vessels = 14;
  double vessel_width = 1.0;     // blur sigma, pixels
  double speckle_level = 0.2;    // u ~ U(1 - s, 1 + s)
  double activation_amplitude = 0.6;
  double activation_x = 16.0;    // center, pixels
  double activation_y = 16.0;
  double activation_radius = 6.0;
  double tissue_floor = 0.25;    // perfusion of parenchyma between vessels
  double base_gain = 0.7;
  std::uint64_t seed = 7;
  std::size_t class_count = 2;

  void validate() const;
};

enum class Split { Train, Test };
const char* split_name(Split s);
Split parse_split(const std::string& s);

struct ImageSample {
  Tensor image;  // [1 x side x side] in [0, 1]
  std::size_t label = 0;
  Split split = Split::Train;
};

// Blurred vessel map in [tissue_floor, 1]; consumes the vessel part of `rng`.
Tensor vessel_map(const SynthConfig& config, Rng& rng);
ImageSample render_image(const SynthConfig& config, std::size_t label, Rng& rng);

struct Dataset {
  std::vector<ImageSample> train;
  std::vector<ImageSample> test;
};

// Sample i of class c in a split is drawn from the stream (seed, split, c, i).
ImageSample render_indexed(const SynthConfig& config, Split split, std::size_t label, std::size_t index);
Dataset make_dataset(const SynthConfig& config, std::array<std::size_t, 2> train_counts,
                     std::array<std::size_t, 2> test_counts);

// Binary 8-bit PGM, value = round(255 * pixel).
void write_pgm(const Tensor& image, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_pgm(const Tensor& image);
Tensor read_pgm(const std::filesystem::path& path);
Tensor decode_pgm(const std::vector<std::uint8_t>& bytes);

struct ManifestEntry {
  std::string path;
  std::size_t label = 0;
  Split split = Split::Train;
};
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace uvar
