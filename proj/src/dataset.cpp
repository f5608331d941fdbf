#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lowrank/harness.hpp"

namespace lowrank {

Shape3 DatasetHandle::input_shape() const {
  if (inputs.empty()) throw Error(ErrorCode::BadShape, "dataset is empty");
  return inputs.front().shape();
}

std::size_t output_width(LossKind loss, std::size_t classes) {
  return loss == LossKind::Logistic ? 1 : classes;
}

std::vector<Sample> to_samples(const DatasetHandle& d, std::span<const std::size_t> indices,
                               std::size_t k_out) {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) {
    Sample s;
    s.x = d.inputs.at(i);
    const std::size_t label = d.labels.at(i);
    if (k_out == 1) {
      s.y = {static_cast<double>(label)};
    } else {
      if (label >= k_out) throw Error(ErrorCode::BadShape, "label exceeds output width");
      s.y.assign(k_out, 0.0);
      s.y[label] = 1.0;
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

bool is_zero(const Tensor3& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](double v) { return v == 0.0; });
}

// Per class, the first floor(fraction * count) of a seeded shuffle go to test.
void stratified_split(DatasetHandle& d, std::uint64_t seed, double test_fraction) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw Error(ErrorCode::BadParams, "test fraction must lie in [0, 1)");
  }
  std::size_t classes = 0;
  for (std::size_t l : d.labels) classes = std::max(classes, l + 1);
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < d.labels.size(); ++i) by_class[d.labels[i]].push_back(i);
  Rng rng = Rng(seed).split(0x5b11);
  d.train_indices.clear();
  d.test_indices.clear();
  for (auto& members : by_class) {
    const auto perm = rng.permutation(members.size());
    const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(members.size())));
    for (std::size_t j = 0; j < members.size(); ++j)
      (j < n_test ? d.test_indices : d.train_indices).push_back(members[perm[j]]);
  }
  std::sort(d.train_indices.begin(), d.train_indices.end());
  std::sort(d.test_indices.begin(), d.test_indices.end());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::uint32_t be32(const std::string& b, std::size_t pos) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(b[pos + i]);
  return v;
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xffu));
}

}  // namespace

std::vector<std::vector<double>> synthetic_means(std::size_t n, std::size_t classes,
                                                 std::uint64_t seed) {
  Rng rng = Rng(seed).split(1);
  std::vector<std::vector<double>> means;
  while (means.size() < classes) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    // Modified Gram-Schmidt against the accepted means.
    for (const auto& q : means) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += v[j] * q[j];
      for (std::size_t j = 0; j < n; ++j) v[j] -= dot * q[j];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;
    for (double& x : v) x /= norm;
    means.push_back(std::move(v));
  }
  for (auto& v : means)
    for (double& x : v) x *= std::sqrt(2.0);
  return means;
}

DatasetHandle gen_synthetic(std::size_t n, std::size_t m, std::size_t classes, std::uint64_t seed,
                            double test_fraction) {
  if (classes < 2) throw Error(ErrorCode::BadShape, "need at least 2 classes");
  if (m < classes) throw Error(ErrorCode::BadShape, "need m >= classes");
  if (n < classes) throw Error(ErrorCode::BadShape, "need n >= classes for separated means");
  const auto means = synthetic_means(n, classes, seed);
  Rng rng = Rng(seed).split(2);
  DatasetHandle d;
  d.classes = classes;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t c = i % classes;
    Tensor3 x(n, 1, 1);
    do {
      for (std::size_t j = 0; j < n; ++j) x[j] = means[c][j] + kSyntheticStddev * rng.normal();
    } while (is_zero(x));
    d.inputs.push_back(std::move(x));
    d.labels.push_back(c);
  }
  stratified_split(d, seed, test_fraction);
  return d;
}

// --------------------------------------------------------------------- IDX

DatasetHandle idx_from_bytes(const std::string& images, const std::string& labels,
                             std::size_t subset, std::uint64_t seed, double test_fraction) {
  if (images.size() < 4 || be32(images, 0) != 0x00000803u) {
    throw Error(ErrorCode::BadMagic, "image file magic is not 0x00000803");
  }
  if (labels.size() < 4 || be32(labels, 0) != 0x00000801u) {
    throw Error(ErrorCode::BadMagic, "label file magic is not 0x00000801");
  }
  if (images.size() < 16) throw Error(ErrorCode::TruncatedFile, "image header truncated");
  if (labels.size() < 8) throw Error(ErrorCode::TruncatedFile, "label header truncated");
  const std::size_t count = be32(images, 4);
  const std::size_t rows = be32(images, 8);
  const std::size_t cols = be32(images, 12);
  const std::size_t label_count = be32(labels, 4);
  if (count != label_count) {
    throw Error(ErrorCode::CountMismatch, std::to_string(count) + " images but " +
                                              std::to_string(label_count) + " labels");
  }
  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + count * pixels) throw Error(ErrorCode::TruncatedFile, "image data truncated");
  if (labels.size() < 8 + count) throw Error(ErrorCode::TruncatedFile, "label data truncated");

  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (subset > 0 && subset < count) {
    order = Rng(seed).split(3).permutation(count);
    order.resize(subset);
  }
  DatasetHandle d;
  for (std::size_t i : order) {
    Tensor3 x(1, rows, cols);
    for (std::size_t p = 0; p < pixels; ++p)
      x[p] = static_cast<unsigned char>(images[16 + i * pixels + p]) / 255.0;
    if (is_zero(x)) {
      ++d.skipped_zero;
      continue;
    }
    d.inputs.push_back(std::move(x));
    const std::size_t label = static_cast<unsigned char>(labels[8 + i]);
    d.labels.push_back(label);
    d.classes = std::max(d.classes, label + 1);
  }
  stratified_split(d, seed, test_fraction);
  return d;
}

DatasetHandle load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::size_t subset, std::uint64_t seed, double test_fraction) {
  return idx_from_bytes(read_file(images), read_file(labels), subset, seed, test_fraction);
}

std::string idx_images_bytes(const std::vector<std::vector<std::uint8_t>>& images, std::size_t rows,
                             std::size_t cols) {
  std::string out;
  put_be32(out, 0x00000803u);
  put_be32(out, static_cast<std::uint32_t>(images.size()));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  for (const auto& img : images) {
    if (img.size() != rows * cols) throw Error(ErrorCode::BadShape, "image size differs from rows*cols");
    out.append(img.begin(), img.end());
  }
  return out;
}

std::string idx_labels_bytes(const std::vector<std::uint8_t>& labels) {
  std::string out;
  put_be32(out, 0x00000801u);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.append(labels.begin(), labels.end());
  return out;
}

// --------------------------------------------------------------------- CSV

DatasetHandle csv_dataset_from_text(const std::string& text, std::uint64_t seed,
                                    double test_fraction) {
  DatasetHandle d;
  std::istringstream in(text);
  std::string line;
  std::size_t width = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("label", 0) == 0) continue;
    std::vector<double> fields;
    std::size_t start = 0;
    while (start <= line.size()) {
      const std::size_t comma = std::min(line.find(',', start), line.size());
      const std::string cell = line.substr(start, comma - start);
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (cell.empty() || end != cell.c_str() + cell.size()) {
        throw Error(ErrorCode::BadShape, "line " + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
      fields.push_back(v);
      start = comma + 1;
    }
    if (fields.size() < 2) throw Error(ErrorCode::BadShape, "line " + std::to_string(line_no) + ": no features");
    if (width == 0) width = fields.size();
    if (fields.size() != width) {
      throw Error(ErrorCode::BadShape, "line " + std::to_string(line_no) + ": inconsistent column count");
    }
    const double label = fields.front();
    if (label < 0 || label != std::floor(label)) {
      throw Error(ErrorCode::BadShape, "line " + std::to_string(line_no) + ": label must be a class index");
    }
    Tensor3 x = Tensor3::from_vector(std::vector<double>(fields.begin() + 1, fields.end()));
    if (is_zero(x)) {
      ++d.skipped_zero;
      continue;
    }
    d.inputs.push_back(std::move(x));
    d.labels.push_back(static_cast<std::size_t>(label));
    d.classes = std::max(d.classes, d.labels.back() + 1);
  }
  stratified_split(d, seed, test_fraction);
  return d;
}

DatasetHandle load_csv_dataset(const std::filesystem::path& path, std::uint64_t seed,
                               double test_fraction) {
  return csv_dataset_from_text(read_file(path), seed, test_fraction);
}

std::string dataset_csv(const DatasetHandle& d) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t n = d.inputs.empty() ? 0 : d.inputs.front().size();
  os << "label";
  for (std::size_t j = 0; j < n; ++j) os << ",x" << j;
  os << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    os << d.labels[i];
    for (double v : d.inputs[i].data()) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

void standardize(DatasetHandle& d) {
  if (d.train_indices.empty()) throw Error(ErrorCode::BadShape, "standardization needs a train split");
  const std::size_t n = d.inputs.front().size();
  std::vector<double> mean(n, 0.0), var(n, 0.0);
  const auto count = static_cast<double>(d.train_indices.size());
  for (std::size_t i : d.train_indices)
    for (std::size_t j = 0; j < n; ++j) mean[j] += d.inputs[i][j];
  for (double& v : mean) v /= count;
  for (std::size_t i : d.train_indices)
    for (std::size_t j = 0; j < n; ++j) {
      const double c = d.inputs[i][j] - mean[j];
      var[j] += c * c;
    }
  for (auto& x : d.inputs)
    for (std::size_t j = 0; j < n; ++j) {
      const double sd = std::sqrt(var[j] / count);
      x[j] = sd > 0.0 ? (x[j] - mean[j]) / sd : x[j] - mean[j];
    }
}

}  // namespace lowrank
