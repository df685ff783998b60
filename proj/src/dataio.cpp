#include "kcal/dataio.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace kcal {

namespace {

template <typename UInt>
void put_le(std::ostream& out, UInt value) {
  char bytes[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  }
  out.write(bytes, sizeof(UInt));
}

template <typename UInt>
bool get_le(std::istream& in, UInt& value) {
  unsigned char bytes[sizeof(UInt)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(UInt))) return false;
  value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    value |= static_cast<UInt>(bytes[i]) << (8 * i);
  }
  return true;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  return out;
}

void check_finite(const Matrix& values, const std::string& source) {
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) {
      if (!std::isfinite(values(i, j))) {
        throw ValidationError(source + ": non-finite value at row " + std::to_string(i) +
                              ", column " + std::to_string(j));
      }
    }
  }
}

}  // namespace

std::string magic_string(const Magic& magic) { return std::string(magic.data(), magic.size()); }

void write_u32_le(std::ostream& out, std::uint32_t value) { put_le(out, value); }
void write_u64_le(std::ostream& out, std::uint64_t value) { put_le(out, value); }

std::uint32_t read_u32_le(std::istream& in, const std::string& source) {
  std::uint32_t value = 0;
  if (!get_le(in, value)) throw SizeMismatchError(source + ": truncated stream");
  return value;
}

std::uint64_t read_u64_le(std::istream& in, const std::string& source) {
  std::uint64_t value = 0;
  if (!get_le(in, value)) throw SizeMismatchError(source + ": truncated stream");
  return value;
}

void write_magic(std::ostream& out, const Magic& magic) { out.write(magic.data(), 4); }

void expect_magic(std::istream& in, const Magic& magic, const std::string& source) {
  Magic found{};
  if (!in.read(found.data(), 4)) {
    throw FormatError(source + ": file too short to hold a header");
  }
  if (found != magic) {
    throw FormatError(source + ": bad magic '" + std::string(found.data(), 4) + "', expected '" +
                      magic_string(magic) + "'");
  }
}

void write_blob(std::ostream& out, const std::string& bytes) {
  put_le<std::uint64_t>(out, bytes.size());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string read_blob(std::istream& in, const std::string& source) {
  const std::uint64_t length = read_u64_le(in, source);
  if (length > (std::uint64_t{1} << 30)) throw SizeMismatchError(source + ": implausible header size");
  std::string bytes(static_cast<std::size_t>(length), '\0');
  if (!in.read(bytes.data(), static_cast<std::streamsize>(length))) {
    throw SizeMismatchError(source + ": truncated header blob");
  }
  return bytes;
}

void EmbeddingDataset::validate() const {
  check_finite(embeddings, "embeddings");
  if (labels.empty()) return;
  if (labels.size() != size()) {
    throw ValidationError("label count " + std::to_string(labels.size()) +
                          " does not match embedding rows " + std::to_string(size()));
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw ValidationError("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    }
  }
}

std::size_t ClassPartition::min_count() const {
  if (counts.empty()) return 0;
  return *std::min_element(counts.begin(), counts.end());
}

void write_matrix(std::ostream& out, const Magic& magic, const Matrix& values, Precision precision) {
  out.write(magic.data(), 4);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(precision));
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(values.rows()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(values.cols()));
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) {
      if (precision == Precision::kFloat32) {
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(values(i, j))));
      } else {
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(values(i, j)));
      }
    }
  }
  if (!out) throw Error("write failed");
}

Matrix read_matrix(std::istream& in, const Magic& magic, const std::string& source) {
  expect_magic(in, magic, source);
  std::uint32_t version = 0;
  std::uint64_t rows = 0;
  std::uint32_t cols = 0;
  if (!get_le(in, version) || !get_le(in, rows) || !get_le(in, cols)) {
    throw SizeMismatchError(source + ": truncated header");
  }
  if (version != static_cast<std::uint32_t>(Precision::kFloat32) &&
      version != static_cast<std::uint32_t>(Precision::kFloat64)) {
    throw FormatError(source + ": unsupported version " + std::to_string(version));
  }
  const bool wide = version == static_cast<std::uint32_t>(Precision::kFloat64);
  const std::size_t width = wide ? 8 : 4;
  if (cols == 0 && rows > 0) throw FormatError(source + ": zero columns with nonzero rows");
  if (cols > 0 && rows > (std::uint64_t{1} << 40) / cols) {
    throw SizeMismatchError(source + ": header dimensions are implausibly large");
  }

  const std::size_t count = static_cast<std::size_t>(rows) * cols;
  std::vector<unsigned char> payload(count * width);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size()) {
    throw SizeMismatchError(source + ": header declares " + std::to_string(rows) + "x" +
                            std::to_string(cols) + " values but the payload is shorter");
  }

  Matrix values(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  double* dst = values.data();
  for (std::size_t k = 0; k < count; ++k) {
    const unsigned char* p = payload.data() + k * width;
    if (wide) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
      dst[k] = std::bit_cast<double>(bits);
    } else {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
      dst[k] = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  check_finite(values, source);
  return values;
}

void write_matrix_file(const std::filesystem::path& path, const Magic& magic, const Matrix& values,
                       Precision precision) {
  auto out = open_output(path);
  write_matrix(out, magic, values, precision);
}

Matrix read_matrix_file(const std::filesystem::path& path, const Magic& magic) {
  auto in = open_input(path);
  return read_matrix(in, magic, path.string());
}

void write_labels(std::ostream& out, const Labels& labels, int num_classes) {
  out.write(kMagicLabels.data(), 4);
  put_le<std::uint32_t>(out, 1);
  put_le<std::uint64_t>(out, labels.size());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(num_classes));
  for (int y : labels) {
    if (y < 0) throw ValidationError("negative label " + std::to_string(y));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(y));
  }
  if (!out) throw Error("write failed");
}

std::pair<Labels, int> read_labels(std::istream& in, const std::string& source) {
  expect_magic(in, kMagicLabels, source);
  std::uint32_t version = 0;
  std::uint64_t n = 0;
  std::uint32_t header_k = 0;
  if (!get_le(in, version) || !get_le(in, n) || !get_le(in, header_k)) {
    throw SizeMismatchError(source + ": truncated header");
  }
  if (version != 1) throw FormatError(source + ": unsupported version " + std::to_string(version));
  if (n > (std::uint64_t{1} << 38)) throw SizeMismatchError(source + ": implausible label count");

  Labels labels;
  labels.reserve(static_cast<std::size_t>(n));
  std::uint32_t max_label = 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t y = 0;
    if (!get_le(in, y)) {
      throw SizeMismatchError(source + ": header declares " + std::to_string(n) +
                              " labels but the payload holds " + std::to_string(i));
    }
    if (header_k != 0 && y >= header_k) {
      throw ValidationError(source + ": label " + std::to_string(y) + " >= K = " +
                            std::to_string(header_k));
    }
    if (y > static_cast<std::uint32_t>(std::numeric_limits<int>::max() - 1)) {
      throw ValidationError(source + ": label out of range");
    }
    max_label = std::max(max_label, y);
    labels.push_back(static_cast<int>(y));
  }
  const int inferred = labels.empty() ? 0 : static_cast<int>(max_label) + 1;
  return {std::move(labels), std::max(static_cast<int>(header_k), inferred)};
}

void write_label_file(const std::filesystem::path& path, const Labels& labels, int num_classes) {
  auto out = open_output(path);
  write_labels(out, labels, num_classes);
}

std::pair<Labels, int> read_label_file(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_labels(in, path.string());
}

EmbeddingDataset read_embedding_file(const std::filesystem::path& path) {
  EmbeddingDataset ds;
  ds.embeddings = read_matrix_file(path, kMagicEmbeddings);
  return ds;
}

void write_embedding_file(const std::filesystem::path& path, const Matrix& embeddings) {
  write_matrix_file(path, kMagicEmbeddings, embeddings, Precision::kFloat32);
}

EmbeddingDataset read_dataset(const std::filesystem::path& embeddings_path,
                              const std::filesystem::path& labels_path) {
  EmbeddingDataset ds = read_embedding_file(embeddings_path);
  auto [labels, k] = read_label_file(labels_path);
  if (labels.size() != ds.size()) {
    throw ValidationError(labels_path.string() + ": " + std::to_string(labels.size()) +
                          " labels for " + std::to_string(ds.size()) + " embedding rows");
  }
  ds.labels = std::move(labels);
  ds.num_classes = k;
  ds.validate();
  return ds;
}

EmbeddingDataset parse_csv(std::string_view text, bool has_label_column) {
  std::vector<std::vector<double>> rows;
  Labels labels;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string_view::npos || line[first] == '#') {
      if (end == text.size()) break;
      continue;
    }

    std::vector<double> fields;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      std::size_t comma = line.find(',', pos);
      if (comma == std::string_view::npos) comma = line.size();
      std::string field(line.substr(pos, comma - pos));
      field.erase(0, field.find_first_not_of(" \t"));
      field.erase(field.find_last_not_of(" \t") + 1);
      double value = 0.0;
      const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
      if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw ValidationError("csv line " + std::to_string(line_no) + ": cannot parse '" + field +
                              "'");
      }
      fields.push_back(value);
      pos = comma + 1;
      if (comma == line.size()) break;
    }

    if (has_label_column) {
      const double y = fields.back();
      if (y < 0 || y != std::floor(y)) {
        throw ValidationError("csv line " + std::to_string(line_no) + ": invalid label");
      }
      labels.push_back(static_cast<int>(y));
      fields.pop_back();
    }
    if (!rows.empty() && fields.size() != rows.front().size()) {
      throw ValidationError("csv line " + std::to_string(line_no) + ": expected " +
                            std::to_string(rows.front().size()) + " columns");
    }
    rows.push_back(std::move(fields));
    if (end == text.size()) break;
  }

  EmbeddingDataset ds;
  const std::size_t h = rows.empty() ? 0 : rows.front().size();
  ds.embeddings.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(h));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < h; ++j) ds.embeddings(i, j) = rows[i][j];
  }
  ds.labels = std::move(labels);
  ds.num_classes =
      ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  ds.validate();
  return ds;
}

EmbeddingDataset read_csv(const std::filesystem::path& path, bool has_label_column) {
  auto in = open_input(path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv(buffer.str(), has_label_column);
}

std::vector<std::size_t> stratified_subsample(const ClassPartition& partition, std::size_t total,
                                              std::uint64_t seed) {
  std::size_t n = 0;
  for (std::size_t c : partition.counts) n += c;
  if (total > n) {
    throw ArgumentError("subsample of " + std::to_string(total) + " rows from a pool of " +
                        std::to_string(n));
  }
  const std::size_t num_classes = partition.counts.size();
  std::vector<std::size_t> quota(num_classes, 0);
  std::vector<double> remainder(num_classes, 0.0);
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double share = static_cast<double>(total) * static_cast<double>(partition.counts[k]) /
                         static_cast<double>(n);
    quota[k] = std::min(partition.counts[k], static_cast<std::size_t>(std::floor(share)));
    remainder[k] = share - static_cast<double>(quota[k]);
    assigned += quota[k];
  }
  std::vector<std::size_t> order(num_classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&remainder](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t pass = 0; assigned < total; ++pass) {
    const std::size_t k = order[pass % num_classes];
    if (quota[k] < partition.counts[k]) {
      ++quota[k];
      ++assigned;
    }
  }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> picked;
  picked.reserve(total);
  for (std::size_t k = 0; k < num_classes; ++k) {
    std::vector<std::size_t> members = partition.per_class_indices[k];
    std::shuffle(members.begin(), members.end(), rng);
    picked.insert(picked.end(), members.begin(),
                  members.begin() + static_cast<std::ptrdiff_t>(quota[k]));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

EmbeddingDataset subset(const EmbeddingDataset& ds, const std::vector<std::size_t>& indices) {
  EmbeddingDataset out;
  out.num_classes = ds.num_classes;
  out.embeddings.resize(static_cast<Eigen::Index>(indices.size()), ds.embeddings.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    out.embeddings.row(static_cast<Eigen::Index>(r)) =
        ds.embeddings.row(static_cast<Eigen::Index>(indices[r]));
  }
  if (!ds.labels.empty()) {
    out.labels.reserve(indices.size());
    for (std::size_t idx : indices) out.labels.push_back(ds.labels[idx]);
  }
  return out;
}

Split split_dataset(const EmbeddingDataset& ds, double cal_fraction, std::uint64_t seed) {
  if (!(cal_fraction > 0.0 && cal_fraction < 1.0)) {
    throw ArgumentError("cal_fraction must lie in (0, 1), got " + std::to_string(cal_fraction));
  }
  const std::size_t n = ds.size();
  const auto n_cal = static_cast<std::size_t>(std::llround(cal_fraction * static_cast<double>(n)));
  if (ds.num_classes > 0 && n_cal < static_cast<std::size_t>(ds.num_classes)) {
    warn("calibration split holds " + std::to_string(n_cal) + " rows for " +
         std::to_string(ds.num_classes) + " classes");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  Split split;
  split.cal_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_cal));
  split.test_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_cal), order.end());
  split.cal = subset(ds, split.cal_indices);
  split.test = subset(ds, split.test_indices);
  return split;
}

ClassPartition class_partition(const Labels& labels, int num_classes) {
  ClassPartition partition;
  partition.per_class_indices.resize(static_cast<std::size_t>(std::max(num_classes, 0)));
  partition.counts.assign(partition.per_class_indices.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) {
      throw ValidationError("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    }
    partition.per_class_indices[static_cast<std::size_t>(y)].push_back(i);
    ++partition.counts[static_cast<std::size_t>(y)];
  }
  return partition;
}

}  // namespace kcal
