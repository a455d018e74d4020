#include "unlearn/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "binary_io.hpp"
#include "unlearn/rng.hpp"

namespace unlearn {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr char kDatasetMagic[8] = {'U', 'L', 'D', 'A', 'T', 'A', '0', '1'};
constexpr std::uint32_t kDatasetVersion = 1;

// gzread passes uncompressed files through unchanged.
std::vector<unsigned char> read_maybe_gzip(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("file not found: " + path.string());
  std::unique_ptr<gzFile_s, decltype(&gzclose)> file(gzopen(path.string().c_str(), "rb"), &gzclose);
  if (!file) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> bytes;
  unsigned char buffer[1 << 16];
  for (;;) {
    const int n = gzread(file.get(), buffer, sizeof buffer);
    if (n < 0) throw FormatError("read error in " + path.string());
    if (n == 0) break;
    bytes.insert(bytes.end(), buffer, buffer + n);
  }
  return bytes;
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset, const std::filesystem::path& path) {
  if (b.size() < offset + 4) throw FormatError("truncated IDX header in " + path.string());
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

std::string hex32(std::uint32_t v) {
  char buffer[16];
  std::snprintf(buffer, sizeof buffer, "0x%08x", v);
  return buffer;
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) b.push_back(static_cast<unsigned char>((v >> shift) & 0xff));
}

void write_gzip_or_plain(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.extension() == ".gz") {
    std::unique_ptr<gzFile_s, decltype(&gzclose)> file(gzopen(path.string().c_str(), "wb"), &gzclose);
    if (!file || gzwrite(file.get(), bytes.data(), static_cast<unsigned>(bytes.size())) != static_cast<int>(bytes.size())) {
      throw std::runtime_error("cannot write " + path.string());
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<std::size_t> choose_rows(std::size_t n, std::size_t count, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(count);
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace

Shape DatasetSplit::sample_shape() const {
  if (inputs.rank() == 0) return {};
  return Shape(inputs.shape().begin() + 1, inputs.shape().end());
}

std::size_t DatasetSplit::sample_size() const { return numel(sample_shape()); }

std::span<const double> DatasetSplit::sample(std::size_t row) const {
  const std::size_t s = sample_size();
  return inputs.data().subspan(row * s, s);
}

Tensor DatasetSplit::gather_inputs(std::span<const std::size_t> rows) const {
  Shape shape = sample_shape();
  const std::size_t s = numel(shape);
  shape.insert(shape.begin(), rows.size());
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = sample(rows[i]);
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * s));
  }
  return out;
}

std::vector<int> DatasetSplit::gather_labels(std::span<const std::size_t> rows) const {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = labels[rows[i]];
  return out;
}

DatasetSplit DatasetSplit::select(std::span<const std::size_t> rows) const {
  DatasetSplit out;
  out.inputs = gather_inputs(rows);
  out.labels = gather_labels(rows);
  out.ids.reserve(rows.size());
  for (auto r : rows) out.ids.push_back(ids[r]);
  if (!targets.empty()) {
    for (auto r : rows) out.targets.push_back(targets[r]);
  }
  out.class_count = class_count;
  out.provenance = provenance;
  out.name = name;
  return out;
}

void DatasetSplit::validate() const {
  const std::size_t n = labels.size();
  if (ids.size() != n) throw std::invalid_argument("dataset has " + std::to_string(n) + " labels but " + std::to_string(ids.size()) + " ids");
  if (inputs.rank() == 0 || inputs.dim(0) != n) {
    throw std::invalid_argument("dataset inputs " + shape_string(inputs.shape()) + " do not hold " + std::to_string(n) + " samples");
  }
  if (!targets.empty() && targets.size() != n) throw std::invalid_argument("dataset targets are not parallel to labels");
  std::unordered_set<SampleId> seen;
  for (auto id : ids) {
    if (!seen.insert(id).second) throw std::invalid_argument("duplicate sample id " + std::to_string(id));
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " + std::to_string(class_count) + ")");
    }
  }
}

ForgetRemain split_forget(const DatasetSplit& dataset, const ForgetSpec& spec) {
  std::vector<std::size_t> forget_rows, remain_rows;
  if (spec.is_whole_class()) {
    if (spec.forget_class < 0 || spec.forget_class >= dataset.class_count) {
      throw std::invalid_argument("forget class " + std::to_string(spec.forget_class) + " outside [0, " +
                                  std::to_string(dataset.class_count) + ")");
    }
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      (dataset.labels[i] == spec.forget_class ? forget_rows : remain_rows).push_back(i);
    }
  } else {
    std::unordered_map<SampleId, std::size_t> row_of;
    for (std::size_t i = 0; i < dataset.size(); ++i) row_of.emplace(dataset.ids[i], i);
    for (auto id : spec.ids) {
      if (!row_of.contains(id)) throw std::invalid_argument("forget id " + std::to_string(id) + " not in dataset");
    }
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      (spec.ids.contains(dataset.ids[i]) ? forget_rows : remain_rows).push_back(i);
    }
  }
  ForgetRemain out{dataset.select(forget_rows), dataset.select(remain_rows)};
  return out;
}

DatasetSplit load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = read_maybe_gzip(images_path);
  const auto labels = read_maybe_gzip(labels_path);
  if (images.empty()) throw FormatError("empty IDX file: " + images_path.string());
  if (labels.empty()) throw FormatError("empty IDX file: " + labels_path.string());

  const auto image_magic = read_be32(images, 0, images_path);
  if (image_magic != kIdxImagesMagic) {
    throw FormatError("bad image magic " + hex32(image_magic) + " in " + images_path.string() + " (expected 0x00000803)");
  }
  const auto label_magic = read_be32(labels, 0, labels_path);
  if (label_magic != kIdxLabelsMagic) {
    throw FormatError("bad label magic " + hex32(label_magic) + " in " + labels_path.string() + " (expected 0x00000801)");
  }
  const std::size_t n = read_be32(images, 4, images_path);
  const std::size_t rows = read_be32(images, 8, images_path);
  const std::size_t cols = read_be32(images, 12, images_path);
  const std::size_t n_labels = read_be32(labels, 4, labels_path);
  if (n != n_labels) {
    throw FormatError("count mismatch: " + std::to_string(n) + " images vs " + std::to_string(n_labels) + " labels");
  }
  if (images.size() != 16 + n * rows * cols) {
    throw FormatError("truncated or oversized image payload in " + images_path.string() + ": expected " +
                      std::to_string(16 + n * rows * cols) + " bytes, found " + std::to_string(images.size()));
  }
  if (labels.size() != 8 + n) {
    throw FormatError("truncated or oversized label payload in " + labels_path.string() + ": expected " +
                      std::to_string(8 + n) + " bytes, found " + std::to_string(labels.size()));
  }

  DatasetSplit out;
  out.inputs = Tensor(Shape{n, 1, rows, cols});
  auto data = out.inputs.data();
  for (std::size_t i = 0; i < n * rows * cols; ++i) data[i] = images[16 + i] / 255.0;
  out.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.labels[i] = labels[8 + i];
    max_label = std::max(max_label, out.labels[i]);
  }
  out.ids.resize(n);
  std::iota(out.ids.begin(), out.ids.end(), SampleId{0});
  out.class_count = std::max(10, max_label + 1);
  out.name = images_path.filename().string();
  return out;
}

void write_mnist_idx(const DatasetSplit& dataset, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  const Shape shape = dataset.sample_shape();
  if (shape.size() != 3 || shape[0] != 1) throw ShapeError("IDX export needs [n,1,rows,cols] inputs, got " + shape_string(dataset.inputs.shape()));
  std::vector<unsigned char> images, labels;
  put_be32(images, kIdxImagesMagic);
  put_be32(images, static_cast<std::uint32_t>(dataset.size()));
  put_be32(images, static_cast<std::uint32_t>(shape[1]));
  put_be32(images, static_cast<std::uint32_t>(shape[2]));
  for (double v : dataset.inputs.data()) {
    images.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  put_be32(labels, kIdxLabelsMagic);
  put_be32(labels, static_cast<std::uint32_t>(dataset.size()));
  for (int y : dataset.labels) labels.push_back(static_cast<unsigned char>(y));
  write_gzip_or_plain(images_path, images);
  write_gzip_or_plain(labels_path, labels);
}

void standardize(DatasetSplit& dataset, double mean, double stddev) {
  if (!(stddev > 0.0)) throw std::invalid_argument("standardize: stddev must be positive");
  for (double& v : dataset.inputs.data()) v = (v - mean) / stddev;
}

DatasetSplit make_synthetic_gaussians(int classes, std::size_t dim, std::size_t per_class, double separation,
                                      std::uint64_t seed) {
  if (classes <= 0 || dim == 0 || per_class == 0) throw std::invalid_argument("make_synthetic_gaussians: counts must be positive");
  if (dim < static_cast<std::size_t>(classes)) {
    throw std::invalid_argument("make_synthetic_gaussians: dim " + std::to_string(dim) + " < classes " +
                                std::to_string(classes) + " leaves some class without an axis centre");
  }
  const std::size_t n = static_cast<std::size_t>(classes) * per_class;
  DatasetSplit out;
  out.inputs = Tensor(Shape{n, dim});
  out.labels.resize(n);
  out.ids.resize(n);
  auto rng = make_rng(seed, {0x6761757373ull});
  std::normal_distribution<double> noise(0.0, 1.0);
  std::size_t row = 0;
  for (int c = 0; c < classes; ++c) {
    for (std::size_t k = 0; k < per_class; ++k, ++row) {
      for (std::size_t j = 0; j < dim; ++j) {
        out.inputs[row * dim + j] = noise(rng) + (j == static_cast<std::size_t>(c) ? separation : 0.0);
      }
      out.labels[row] = c;
      out.ids[row] = row;
    }
  }
  out.class_count = classes;
  out.name = "gaussians";
  return out;
}

Corrupted inject_backdoor(const DatasetSplit& dataset, std::size_t count, std::size_t trigger_size, int target_label,
                          std::uint64_t seed, double trigger_value) {
  if (count > dataset.size()) {
    throw std::invalid_argument("inject_backdoor: " + std::to_string(count) + " poisoned samples requested from " +
                                std::to_string(dataset.size()));
  }
  const Shape shape = dataset.sample_shape();
  if (shape.size() != 3) throw ShapeError("inject_backdoor needs image samples [C,H,W], got " + shape_string(shape));
  if (trigger_size > shape[1] || trigger_size > shape[2]) {
    throw std::invalid_argument("inject_backdoor: trigger " + std::to_string(trigger_size) + "x" +
                                std::to_string(trigger_size) + " larger than image " + std::to_string(shape[1]) + "x" +
                                std::to_string(shape[2]));
  }
  if (target_label < 0 || target_label >= dataset.class_count) throw std::invalid_argument("inject_backdoor: target label out of range");
  Corrupted out{dataset, {}};
  if (count == 0) return out;
  auto rng = make_rng(seed, {0x706f69736f6eull});
  const auto rows = choose_rows(dataset.size(), count, rng);
  const std::size_t c = shape[0], h = shape[1], w = shape[2];
  auto data = out.dataset.inputs.data();
  for (auto r : rows) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = h - trigger_size; y < h; ++y) {
        for (std::size_t x = w - trigger_size; x < w; ++x) data[r * c * h * w + (ch * h + y) * w + x] = trigger_value;
      }
    }
    out.dataset.labels[r] = target_label;
    out.affected_ids.insert(dataset.ids[r]);
  }
  out.dataset.provenance = {Provenance::Poisoned, count, trigger_size, target_label, 0.0, seed};
  return out;
}

std::size_t ratio_count(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::nearbyint(static_cast<double>(n) * ratio));
}

Corrupted inject_label_noise(const DatasetSplit& dataset, double noise_ratio, std::uint64_t seed) {
  if (dataset.class_count < 2) throw std::invalid_argument("inject_label_noise: needs at least 2 classes");
  if (!(noise_ratio >= 0.0 && noise_ratio <= 1.0)) throw std::invalid_argument("inject_label_noise: ratio must lie in [0,1]");
  Corrupted out{dataset, {}};
  const std::size_t count = ratio_count(dataset.size(), noise_ratio);
  if (count == 0) return out;
  auto rng = make_rng(seed, {0x6e6f697365ull});
  const auto rows = choose_rows(dataset.size(), count, rng);
  std::uniform_int_distribution<int> other(0, dataset.class_count - 2);
  for (auto r : rows) {
    const int original = dataset.labels[r];
    int y = other(rng);
    if (y >= original) ++y;
    out.dataset.labels[r] = y;
    out.affected_ids.insert(dataset.ids[r]);
  }
  out.dataset.provenance = {Provenance::LabelNoised, 0, 0, 0, noise_ratio, seed};
  return out;
}

DatasetSplit subsample_remain(const DatasetSplit& remain, std::size_t count, std::uint64_t seed) {
  if (count > remain.size()) {
    throw std::invalid_argument("subsample_remain: " + std::to_string(count) + " samples requested from " +
                                std::to_string(remain.size()));
  }
  auto rng = make_rng(seed, {0x73756273ull});
  const auto rows = choose_rows(remain.size(), count, rng);
  return remain.select(rows);
}

DatasetSplit subsample_remain_fraction(const DatasetSplit& remain, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("subsample_remain: fraction must lie in [0,1]");
  return subsample_remain(remain, ratio_count(remain.size(), fraction), seed);
}

DatasetSplit concatenate(const DatasetSplit& a, const DatasetSplit& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.sample_shape() != b.sample_shape()) throw ShapeError("concatenate: sample shapes differ");
  DatasetSplit out = a;
  Shape shape = a.inputs.shape();
  shape[0] = a.size() + b.size();
  std::vector<double> data(a.inputs.values());
  data.insert(data.end(), b.inputs.values().begin(), b.inputs.values().end());
  out.inputs = Tensor(std::move(shape), std::move(data));
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.ids.insert(out.ids.end(), b.ids.begin(), b.ids.end());
  out.targets.insert(out.targets.end(), b.targets.begin(), b.targets.end());
  out.class_count = std::max(a.class_count, b.class_count);
  return out;
}

void save_dataset(const DatasetSplit& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  detail::BinaryWriter w(out);
  w.raw(kDatasetMagic, sizeof kDatasetMagic);
  w.u32(kDatasetVersion);
  w.str(dataset.name);
  w.i32(dataset.class_count);
  std::vector<std::uint64_t> shape(dataset.inputs.shape().begin(), dataset.inputs.shape().end());
  w.u64s(shape);
  w.f64s(dataset.inputs.values());
  std::vector<std::uint64_t> labels(dataset.labels.begin(), dataset.labels.end());
  w.u64s(labels);
  w.u64s(std::vector<std::uint64_t>(dataset.ids.begin(), dataset.ids.end()));
  w.f64s(dataset.targets);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

DatasetSplit load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  detail::BinaryReader r(in);
  try {
    char magic[8];
    r.raw(magic, sizeof magic);
    if (!std::equal(magic, magic + 8, kDatasetMagic)) throw FormatError("not a dataset container: " + path.string());
    if (r.u32() != kDatasetVersion) throw FormatError("unsupported dataset container version in " + path.string());
    DatasetSplit out;
    out.name = r.str();
    out.class_count = r.i32();
    auto shape = r.u64s();
    auto data = r.f64s();
    out.inputs = Tensor(Shape(shape.begin(), shape.end()), std::move(data));
    for (auto v : r.u64s()) out.labels.push_back(static_cast<int>(v));
    for (auto v : r.u64s()) out.ids.push_back(v);
    out.targets = r.f64s();
    out.validate();
    return out;
  } catch (const std::runtime_error& e) {
    if (dynamic_cast<const FormatError*>(&e)) throw;
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace unlearn
