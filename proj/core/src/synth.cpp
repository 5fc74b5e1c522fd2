#include "ultravar/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ultravar/error.hpp"

namespace uvar {

namespace {

struct Walker {
  double x, y, angle, weight;
  std::size_t steps;
  int depth;
};

void splat(std::vector<double>& acc, std::size_t side, double x, double y, double w) {
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const long px = static_cast<long>(fx) + dx, py = static_cast<long>(fy) + dy;
      if (px < 0 || py < 0 || px >= static_cast<long>(side) || py >= static_cast<long>(side)) continue;
      const double wx = dx ? ax : 1.0 - ax, wy = dy ? ay : 1.0 - ay;
      acc[static_cast<std::size_t>(py) * side + static_cast<std::size_t>(px)] += w * wx * wy;
    }
}

std::vector<double> gaussian_blur(const std::vector<double>& img, std::size_t side, double sigma) {
  if (sigma <= 0.0) return img;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  const long n = static_cast<long>(side);
  std::vector<double> tmp(img.size()), out(img.size());
  for (long y = 0; y < n; ++y)
    for (long x = 0; x < n; ++x) {
      double a = 0.0;
      for (int i = -r; i <= r; ++i) a += k[i + r] * img[y * n + std::clamp(x + i, 0L, n - 1)];
      tmp[y * n + x] = a;
    }
  for (long y = 0; y < n; ++y)
    for (long x = 0; x < n; ++x) {
      double a = 0.0;
      for (int i = -r; i <= r; ++i) a += k[i + r] * tmp[std::clamp(y + i, 0L, n - 1) * n + x];
      out[y * n + x] = a;
    }
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  if (side < 16) throw ConfigError("synth: side must be >= 16");
  if (!(activation_radius > 0.0) || activation_radius >= static_cast<double>(side) / 2.0)
    throw ConfigError("synth: activation radius must be in (0, side/2)");
  if (speckle_level < 0.0 || speckle_level > 1.0) throw ConfigError("synth: speckle level must be in [0, 1]");
  if (activation_amplitude < 0.0) throw ConfigError("synth: activation amplitude must be >= 0");
  if (vessel_width < 0.0 || tissue_floor < 0.0 || tissue_floor > 1.0 || base_gain <= 0.0)
    throw ConfigError("synth: invalid vessel parameters");
  if (class_count != 2) throw ConfigError("synth: class_count must be 2");
}

const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw ParseError("unknown split '" + s + "'");
}

Tensor vessel_map(const SynthConfig& config, Rng& rng) {
  const std::size_t side = config.side;
  const double n = static_cast<double>(side);
  std::vector<double> acc(side * side, 0.0);
  std::vector<Walker> stack;
  for (std::size_t v = 0; v < config.n_vessels; ++v) {
    stack.push_back({rng.uniform(0.0, n), rng.uniform(0.0, n), rng.uniform(0.0, 2.0 * std::numbers::pi),
                     rng.uniform(0.6, 1.0), side, 0});
    while (!stack.empty()) {
      Walker w = stack.back();
      stack.pop_back();
      for (std::size_t s = 0; s < w.steps; ++s) {
        splat(acc, side, w.x, w.y, w.weight);
        w.angle += 0.25 * rng.normal();
        w.x += std::cos(w.angle);
        w.y += std::sin(w.angle);
        if (w.depth < 2 && rng.bernoulli(0.04)) {
          const double turn = rng.uniform(0.4, 0.9) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
          stack.push_back({w.x, w.y, w.angle + turn, 0.7 * w.weight, (w.steps - s) / 2, w.depth + 1});
        }
      }
    }
  }
  const double sigma = config.vessel_width;
  auto blurred = gaussian_blur(acc, side, sigma);
  // a centerline of unit weight blurs to a peak of about 1/(sqrt(2 pi) sigma)
  const double gain = 1.6 * std::sqrt(2.0 * std::numbers::pi) * std::max(sigma, 0.4);
  Tensor out({1, side, side});
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double m = 1.0 - std::exp(-gain * blurred[i]);
    o[i] = static_cast<float>(config.tissue_floor + (1.0 - config.tissue_floor) * m);
  }
  return out;
}

ImageSample render_image(const SynthConfig& config, std::size_t label, Rng& rng) {
  config.validate();
  if (label >= config.class_count) throw IndexError("render_image: label " + std::to_string(label));
  Tensor v = vessel_map(config, rng);
  const std::size_t side = config.side;
  const double r2 = config.activation_radius * config.activation_radius;
  Tensor img({1, side, side});
  auto vv = v.data();
  auto o = img.data();
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const std::size_t i = y * side + x;
      double p = config.base_gain * vv[i];
      if (label == 1) {
        const double dx = static_cast<double>(x) + 0.5 - config.activation_x;
        const double dy = static_cast<double>(y) + 0.5 - config.activation_y;
        p += config.activation_amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * r2)) * vv[i];
      }
      const double u = rng.uniform(1.0 - config.speckle_level, 1.0 + config.speckle_level);
      o[i] = static_cast<float>(std::clamp(p * u, 0.0, 1.0));
    }
  return {img, label, Split::Train};
}

ImageSample render_indexed(const SynthConfig& config, Split split, std::size_t label, std::size_t index) {
  Rng rng(config.seed, split == Split::Train ? 1 : 2, (static_cast<std::uint64_t>(label) << 32) | index);
  ImageSample s = render_image(config, label, rng);
  s.split = split;
  return s;
}

Dataset make_dataset(const SynthConfig& config, std::array<std::size_t, 2> train_counts,
                     std::array<std::size_t, 2> test_counts) {
  config.validate();
  for (auto c : train_counts)
    if (c == 0) throw ConfigError("make_dataset: every class needs at least one training sample");
  for (auto c : test_counts)
    if (c == 0) throw ConfigError("make_dataset: every class needs at least one test sample");
  Dataset ds;
  for (std::size_t label = 0; label < 2; ++label) {
    for (std::size_t i = 0; i < train_counts[label]; ++i) ds.train.push_back(render_indexed(config, Split::Train, label, i));
    for (std::size_t i = 0; i < test_counts[label]; ++i) ds.test.push_back(render_indexed(config, Split::Test, label, i));
  }
  return ds;
}

std::vector<std::uint8_t> encode_pgm(const Tensor& image) {
  if (image.rank() < 2) throw DimensionError("write_pgm: need at least 2 dims, got " + shape_str(image.shape()));
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  if (image.numel() != h * w) throw DimensionError("write_pgm: single-channel image expected");
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (float v : image.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("write_pgm: pixel outside [0, 1]");
    out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * v)));
  }
  return out;
}

void write_pgm(const Tensor& image, const std::filesystem::path& path) {
  const auto bytes = encode_pgm(image);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

Tensor decode_pgm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw ParseError(std::string("pgm: missing ") + what);
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1u << 20) throw ParseError(std::string("pgm: ") + what + " too large");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ParseError("pgm: bad magic, expected P5");
  pos = 2;
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0) throw ParseError("pgm: zero dimension");
  if (maxval != 255) throw ParseError("pgm: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ParseError("pgm: missing separator after header");
  ++pos;
  if (bytes.size() - pos != w * h) throw ParseError("pgm: expected " + std::to_string(w * h) + " data bytes");
  Tensor img({1, h, w});
  auto o = img.data();
  for (std::size_t i = 0; i < w * h; ++i) o[i] = static_cast<float>(bytes[pos + i] / 255.0);
  return img;
}

Tensor read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_pgm(bytes);
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& e : entries) f << e.path << '\t' << e.label << '\t' << split_name(e.split) << '\n';
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open manifest '" + path.string() + "'");
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string p, label, split, extra;
    if (!std::getline(ss, p, '\t') || !std::getline(ss, label, '\t') || !std::getline(ss, split, '\t') ||
        std::getline(ss, extra, '\t') || label.empty() ||
        label.find_first_not_of("0123456789") != std::string::npos)
      throw ParseError("manifest line " + std::to_string(lineno) + ": expected path<TAB>label<TAB>split");
    out.push_back({p, std::stoul(label), parse_split(split)});
  }
  return out;
}

}  // namespace uvar
