#include "tanet/dataio.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tanet {

void PhantomSpec::validate() const {
  if (height < 32 || width < 32) throw std::invalid_argument("PhantomSpec: frame must be at least 32x32");
  if (speckle < 0.0) throw std::invalid_argument("PhantomSpec: speckle must be >= 0");
  if (jitter < 0.0) throw std::invalid_argument("PhantomSpec: jitter must be >= 0");
  if (max_attempts < 1) throw std::invalid_argument("PhantomSpec: max_attempts must be >= 1");
  if (!(min_fraction >= 0.0 && max_thin_fraction > min_fraction && max_thin_fraction <= 1.0)) {
    throw std::invalid_argument("PhantomSpec: need 0 <= min_fraction < max_thin_fraction <= 1");
  }
}

namespace {

struct Ellipse {
  double cx, cy, a, b;
  bool contains(double x, double y) const {
    const double u = (x - cx) / a, v = (y - cy) / b;
    return u * u + v * v <= 1.0;
  }
};

std::mt19937_64 sample_rng(std::uint64_t seed, int index, int attempt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(attempt)};
  return std::mt19937_64(seq);
}

// Label map for one draw of the geometry; labels follow RoiSet::cardiac().
IntTensor draw_layout(const PhantomSpec& spec, std::mt19937_64& rng) {
  const double w = spec.width, h = spec.height, j = spec.jitter;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto jit = [&](double base, double spread) { return base + j * spread * u(rng); };

  const double wall = std::clamp(jit(0.0625, 0.016) * w, 2.0, 8.0);
  const Ellipse lv{jit(0.42, 0.05) * w, jit(0.52, 0.05) * h, jit(0.16, 0.02) * w, jit(0.13, 0.016) * h};
  const Ellipse ring{lv.cx, lv.cy, lv.a + wall, lv.b + wall};
  const Ellipse rv{lv.cx + jit(0.03, 0.03) * w, ring.cy - ring.b + jit(0.03, 0.02) * h,
                   jit(0.21, 0.025) * w, jit(0.12, 0.015) * h};
  const Ellipse la{jit(0.72, 0.03) * w, jit(0.78, 0.03) * h, jit(0.13, 0.015) * w, jit(0.11, 0.012) * h};
  const double split = 0.35 * lv.b;

  IntTensor mask({spec.height, spec.width});
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      int label = 0;
      if (lv.contains(x, y)) {
        label = 1;
      } else if (ring.contains(x, y)) {
        if (y < lv.cy - split) label = 4;
        else if (y > lv.cy + split) label = 5;
      } else if (rv.contains(x, y) && y < lv.cy) {
        label = 2;
      } else if (la.contains(x, y)) {
        label = 3;
      }
      mask.data[static_cast<std::size_t>(y * spec.width + x)] = label;
    }
  }
  return mask;
}

bool layout_ok(const PhantomSpec& spec, const IntTensor& mask) {
  std::array<std::int64_t, 6> count{};
  for (auto v : mask.data) ++count[static_cast<std::size_t>(v)];
  const double total = static_cast<double>(mask.numel());
  for (int l = 1; l <= 5; ++l) {
    if (count[l] / total < spec.min_fraction) return false;
  }
  return count[4] / total <= spec.max_thin_fraction && count[5] / total <= spec.max_thin_fraction;
}

}  // namespace

SegSample generate_phantom(const PhantomSpec& spec, int index) {
  spec.validate();
  if (index < 0) throw std::invalid_argument("generate_phantom: index must be >= 0");
  for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
    auto rng = sample_rng(spec.seed, index, attempt);
    IntTensor mask = draw_layout(spec, rng);
    if (!layout_ok(spec, mask)) continue;

    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::array<double, 6> level{};
    for (int l = 1; l <= 5; ++l) level[l] = kPhantomIntensity[l] + 0.02 * spec.jitter * u(rng);
    const double bg0 = 0.05 + 0.03 * spec.jitter * u(rng);
    const double bg1 = 0.20 + 0.03 * spec.jitter * u(rng);
    const double angle = 3.14159265358979 * u(rng);
    const double gx = std::cos(angle), gy = std::sin(angle);

    const std::int64_t hw = static_cast<std::int64_t>(spec.height) * spec.width;
    Tensor<float> image({3, spec.height, spec.width});
    for (int y = 0; y < spec.height; ++y) {
      for (int x = 0; x < spec.width; ++x) {
        const int label = mask.data[static_cast<std::size_t>(y * spec.width + x)];
        double v;
        if (label == 0) {
          const double px = 2.0 * x / (spec.width - 1) - 1.0, py = 2.0 * y / (spec.height - 1) - 1.0;
          const double t = std::clamp(0.5 + 0.35 * (px * gx + py * gy), 0.0, 1.0);
          v = bg0 + (bg1 - bg0) * t;
        } else {
          v = level[static_cast<std::size_t>(label)];
        }
        if (spec.speckle > 0.0) v *= 1.0 + spec.speckle * noise(rng);
        const float f = static_cast<float>(std::clamp(v, 0.0, 1.0));
        for (int c = 0; c < 3; ++c) image.ptr()[c * hw + y * spec.width + x] = f;
      }
    }
    char id[32];
    std::snprintf(id, sizeof(id), "phantom_%05d", index);
    return {std::move(image), std::move(mask), id};
  }
  throw std::runtime_error("generate_phantom: no valid layout for index " + std::to_string(index) +
                           " after " + std::to_string(spec.max_attempts) + " attempts");
}

std::vector<SegSample> generate_phantom_dataset(const PhantomSpec& spec, int count) {
  if (count < 1) throw std::invalid_argument("generate_phantom_dataset: count must be >= 1");
  std::vector<SegSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_phantom(spec, i));
  return out;
}

DatasetSplit split_dataset(std::vector<SegSample> samples) {
  const std::size_t n = samples.size();
  const std::size_t n_train = n * 8 / 10, n_val = n / 10;
  DatasetSplit s;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? s.train : (i < n_train + n_val ? s.val : s.test);
    dst.push_back(std::move(samples[i]));
  }
  return s;
}

namespace {

double catmull_rom(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

struct CubicTaps {
  std::int64_t idx[4];
  double w[4];
};

std::vector<CubicTaps> cubic_taps(std::int64_t in, std::int64_t out) {
  std::vector<CubicTaps> taps(static_cast<std::size_t>(out));
  for (std::int64_t i = 0; i < out; ++i) {
    const double src = out > 1 ? static_cast<double>(i) * (in - 1) / (out - 1) : 0.0;
    const double base = std::floor(src);
    for (int k = 0; k < 4; ++k) {
      const double pos = base - 1 + k;
      taps[i].idx[k] = std::clamp<std::int64_t>(static_cast<std::int64_t>(pos), 0, in - 1);
      taps[i].w[k] = catmull_rom(src - pos);
    }
  }
  return taps;
}

}  // namespace

Tensor<float> resize_bicubic(const Tensor<float>& image, std::int64_t out_h, std::int64_t out_w) {
  if (image.rank() != 3) throw ShapeError("resize_bicubic: expected [C,H,W]");
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h < 4 || w < 4) throw std::invalid_argument("resize_bicubic: input must be at least 4x4");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bicubic: output dims must be >= 1");
  const auto ty = cubic_taps(h, out_h), tx = cubic_taps(w, out_w);
  Tensor<float> out({c, out_h, out_w});
  std::vector<double> rows(static_cast<std::size_t>(out_h * w));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const float* src = image.ptr() + ch * h * w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      for (std::int64_t x = 0; x < w; ++x) {
        double v = 0.0;
        for (int k = 0; k < 4; ++k) v += ty[i].w[k] * src[ty[i].idx[k] * w + x];
        rows[i * w + x] = v;
      }
    }
    float* dst = out.ptr() + ch * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      for (std::int64_t j = 0; j < out_w; ++j) {
        double v = 0.0;
        for (int k = 0; k < 4; ++k) v += tx[j].w[k] * rows[i * w + tx[j].idx[k]];
        dst[i * out_w + j] = static_cast<float>(v);
      }
    }
  }
  return out;
}

IntTensor resize_nearest(const IntTensor& mask, std::int64_t out_h, std::int64_t out_w) {
  if (mask.shape.size() != 2) throw ShapeError("resize_nearest: expected [H,W]");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_nearest: output dims must be >= 1");
  const std::int64_t h = mask.dim(0), w = mask.dim(1);
  auto src_index = [](std::int64_t i, std::int64_t in, std::int64_t out) {
    return out > 1 ? static_cast<std::int64_t>(std::lround(static_cast<double>(i) * (in - 1) / (out - 1))) : 0;
  };
  IntTensor out({out_h, out_w});
  for (std::int64_t i = 0; i < out_h; ++i) {
    const std::int64_t y = src_index(i, h, out_h);
    for (std::int64_t j = 0; j < out_w; ++j) {
      out.data[static_cast<std::size_t>(i * out_w + j)] =
          mask.data[static_cast<std::size_t>(y * w + src_index(j, w, out_w))];
    }
  }
  return out;
}

namespace {

void write_pgm(const std::vector<std::uint8_t>& bytes, std::int64_t h, std::int64_t w,
               const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << "P5\n" << w << ' ' << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

struct PgmData {
  std::int64_t h = 0, w = 0;
  std::vector<std::uint8_t> bytes;
};

PgmData read_pgm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (f.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(f, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t.push_back(ch);
      }
    }
    return t;
  };
  if (token() != "P5") throw FormatError(path.string() + ": not a binary PGM (missing P5 magic)");
  PgmData d;
  std::int64_t maxval = 0;
  try {
    d.w = std::stoll(token());
    d.h = std::stoll(token());
    maxval = std::stoll(token());
  } catch (const std::exception&) {
    throw FormatError(path.string() + ": malformed PGM header");
  }
  if (d.w < 1 || d.h < 1) throw FormatError(path.string() + ": bad PGM dimensions");
  if (maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
  d.bytes.resize(static_cast<std::size_t>(d.w * d.h));
  f.read(reinterpret_cast<char*>(d.bytes.data()), static_cast<std::streamsize>(d.bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(d.bytes.size())) {
    throw FormatError(path.string() + ": truncated PGM payload (" + std::to_string(f.gcount()) +
                      " of " + std::to_string(d.bytes.size()) + " bytes)");
  }
  return d;
}

}  // namespace

void save_pgm(const Tensor<float>& image, const std::filesystem::path& path) {
  if (!(image.rank() == 2 || (image.rank() == 3 && image.dim(0) == 1))) {
    throw ShapeError("save_pgm: expected [H,W] or [1,H,W], got " + to_string(image.shape()));
  }
  const std::int64_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  std::vector<std::uint8_t> bytes(image.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(static_cast<double>(image.data()[i]), 0.0, 1.0);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  write_pgm(bytes, h, w, path);
}

void save_pgm(const IntTensor& mask, const std::filesystem::path& path) {
  if (mask.shape.size() != 2) throw ShapeError("save_pgm: mask must be [H,W]");
  std::vector<std::uint8_t> bytes(mask.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (mask.data[i] < 0 || mask.data[i] > 255) {
      throw std::out_of_range("save_pgm: label " + std::to_string(mask.data[i]) + " does not fit a byte");
    }
    bytes[i] = static_cast<std::uint8_t>(mask.data[i]);
  }
  write_pgm(bytes, mask.dim(0), mask.dim(1), path);
}

Tensor<float> load_pgm_image(const std::filesystem::path& path) {
  const PgmData d = read_pgm(path);
  Tensor<float> out({1, d.h, d.w});
  for (std::size_t i = 0; i < d.bytes.size(); ++i) out.data()[i] = d.bytes[i] / 255.0f;
  return out;
}

IntTensor load_pgm_mask(const std::filesystem::path& path) {
  const PgmData d = read_pgm(path);
  IntTensor out({d.h, d.w});
  std::copy(d.bytes.begin(), d.bytes.end(), out.data.begin());
  return out;
}

void save_color_image(const Tensor<float>& image, const std::string& prefix) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("save_color_image: expected [3,H,W]");
  const std::int64_t h = image.dim(1), w = image.dim(2);
  const char* suffix[3] = {".r.pgm", ".g.pgm", ".b.pgm"};
  for (int c = 0; c < 3; ++c) {
    Tensor<float> plane({h, w}, std::vector<float>(image.ptr() + c * h * w, image.ptr() + (c + 1) * h * w));
    save_pgm(plane, prefix + suffix[c]);
  }
}

Tensor<float> load_color_image(const std::string& prefix) {
  const char* suffix[3] = {".r.pgm", ".g.pgm", ".b.pgm"};
  std::vector<Tensor<float>> planes;
  for (const char* s : suffix) planes.push_back(load_pgm_image(prefix + s));
  const std::int64_t h = planes[0].dim(1), w = planes[0].dim(2);
  Tensor<float> out({3, h, w});
  for (int c = 0; c < 3; ++c) {
    if (planes[c].dim(1) != h || planes[c].dim(2) != w) {
      throw FormatError(prefix + ": colour planes disagree in size");
    }
    std::copy(planes[c].data().begin(), planes[c].data().end(), out.ptr() + c * h * w);
  }
  return out;
}

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get(std::istream& is, const std::string& what) {
  unsigned char b[sizeof(U)];
  is.read(reinterpret_cast<char*>(b), sizeof(U));
  if (is.gcount() != sizeof(U)) throw FormatError("checkpoint truncated while reading " + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
  U v;
  std::memcpy(&v, b, sizeof(U));
  return v;
}

}  // namespace

void save_checkpoint(std::span<const NamedTensor> entries, const std::filesystem::path& path) {
  std::set<std::string> names;
  for (const auto& e : entries) {
    if (!names.insert(e.name).second) throw std::invalid_argument("save_checkpoint: duplicate name " + e.name);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write("TANT", 4);
  put<std::uint32_t>(f, kCheckpointVersion);
  put<std::uint32_t>(f, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put<std::uint32_t>(f, static_cast<std::uint32_t>(e.name.size()));
    f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(f, e.frozen ? 1 : 0);
    put<std::uint32_t>(f, static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) put<std::uint32_t>(f, static_cast<std::uint32_t>(d));
    for (float v : e.tensor.data()) put<float>(f, v);
  }
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  char magic[4] = {};
  f.read(magic, 4);
  if (f.gcount() != 4 || std::string(magic, 4) != "TANT") {
    throw FormatError(path.string() + ": bad magic, not a TANT checkpoint");
  }
  const auto version = get<std::uint32_t>(f, "version");
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = get<std::uint32_t>(f, "entry count");
  std::vector<NamedTensor> out;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(f, "name length");
    if (len > (1u << 16)) throw FormatError("checkpoint: implausible name length");
    std::string name(len, '\0');
    f.read(name.data(), len);
    if (f.gcount() != static_cast<std::streamsize>(len)) throw FormatError("checkpoint truncated in a name");
    if (!names.insert(name).second) throw FormatError("checkpoint: duplicate entry " + name);
    const auto frozen = get<std::uint8_t>(f, "frozen flag");
    if (frozen > 1) throw FormatError("checkpoint: bad frozen flag for " + name);
    const auto rank = get<std::uint32_t>(f, "rank");
    if (rank == 0 || rank > 8) throw FormatError("checkpoint: bad rank for " + name);
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = get<std::uint32_t>(f, "dims");
      if (d == 0) throw FormatError("checkpoint: zero dimension in " + name);
      shape.push_back(d);
      numel *= d;
      if (numel > (1ull << 32)) throw FormatError("checkpoint: tensor too large: " + name);
    }
    std::vector<float> data(numel);
    for (auto& v : data) v = get<float>(f, "data of " + name);
    out.push_back({name, Tensor<float>(shape, std::move(data)), frozen == 1});
  }
  if (f.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes");
  return out;
}

namespace {

struct Counts {
  std::int64_t inter = 0, pred = 0, gt = 0;
};

Counts count(const IntTensor& pred, const IntTensor& gt, int label) {
  if (pred.shape != gt.shape) {
    throw ShapeError("metric: mask shapes differ: " + to_string(pred.shape) + " vs " + to_string(gt.shape));
  }
  Counts c;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] == label, g = gt.data[i] == label;
    c.inter += p && g;
    c.pred += p;
    c.gt += g;
  }
  return c;
}

}  // namespace

double iou(const IntTensor& pred, const IntTensor& gt, int label) {
  const Counts c = count(pred, gt, label);
  const std::int64_t uni = c.pred + c.gt - c.inter;
  return uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(uni);
}

double f1(const IntTensor& pred, const IntTensor& gt, int label) {
  const Counts c = count(pred, gt, label);
  const std::int64_t denom = c.pred + c.gt;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.inter) / static_cast<double>(denom);
}

double RegionScores::mean_iou() const {
  double s = 0.0;
  for (double v : iou) s += v;
  return iou.empty() ? 0.0 : s / static_cast<double>(iou.size());
}

double RegionScores::mean_f1() const {
  double s = 0.0;
  for (double v : f1) s += v;
  return f1.empty() ? 0.0 : s / static_cast<double>(f1.size());
}

RegionScores evaluate_masks(std::span<const IntTensor> preds, std::span<const IntTensor> gts,
                            const RoiSet& rois) {
  if (preds.size() != gts.size() || preds.empty()) {
    throw std::invalid_argument("evaluate_masks: need equally many (>= 1) predictions and targets");
  }
  RegionScores s;
  s.names = rois.names;
  s.iou.assign(rois.size(), 0.0);
  s.f1.assign(rois.size(), 0.0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t r = 0; r < rois.size(); ++r) {
      s.iou[r] += iou(preds[i], gts[i], rois.labels[r]);
      s.f1[r] += f1(preds[i], gts[i], rois.labels[r]);
    }
  }
  for (std::size_t r = 0; r < rois.size(); ++r) {
    s.iou[r] /= static_cast<double>(preds.size());
    s.f1[r] /= static_cast<double>(preds.size());
  }
  return s;
}

FpsReport fps_benchmark(const std::function<void()>& infer, int warmup, int iters) {
  if (iters < 1) throw std::invalid_argument("fps_benchmark: iters must be >= 1");
  if (warmup < 0) throw std::invalid_argument("fps_benchmark: warmup must be >= 0");
  NoGradGuard no_grad;
  for (int i = 0; i < warmup; ++i) infer();
  std::vector<double> t(static_cast<std::size_t>(iters));
  for (auto& s : t) {
    const auto t0 = std::chrono::steady_clock::now();
    infer();
    s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  std::sort(t.begin(), t.end());
  auto pct = [&](double q) {
    const auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(t.size()))) ;
    return t[std::min(t.size() - 1, k == 0 ? 0 : k - 1)];
  };
  FpsReport r;
  r.iters = iters;
  r.median_s = t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
  r.p10_s = pct(0.10);
  r.p90_s = pct(0.90);
  r.fps = r.median_s > 0.0 ? 1.0 / r.median_s : 0.0;
  return r;
}

}  // namespace tanet
