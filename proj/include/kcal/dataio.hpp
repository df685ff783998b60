#pragma once

#include "kcal/common.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

namespace kcal {

/// n x h embeddings plus n labels in [0, num_classes).
///
/// Datasets read from an embedding file alone carry an empty label vector and
/// num_classes == 0 until labels are attached.
struct EmbeddingDataset {
  Matrix embeddings;
  Labels labels;
  int num_classes = 0;

  std::size_t size() const { return static_cast<std::size_t>(embeddings.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(embeddings.cols()); }
  bool has_labels() const { return !labels.empty() || embeddings.rows() == 0; }

  // Throws ValidationError when an invariant does not hold.
  void validate() const;
};

/// Row indices of every class, in input order, plus the per-class counts.
struct ClassPartition {
  std::vector<std::vector<std::size_t>> per_class_indices;
  std::vector<std::size_t> counts;

  int num_classes() const { return static_cast<int>(counts.size()); }
  std::size_t min_count() const;
};

// Four-byte container tags.
using Magic = std::array<char, 4>;
inline constexpr Magic kMagicEmbeddings{'K', 'E', 'M', 'B'};
inline constexpr Magic kMagicLabels{'K', 'L', 'A', 'B'};
inline constexpr Magic kMagicProbabilities{'K', 'P', 'R', 'B'};
inline constexpr Magic kMagicLogits{'K', 'L', 'G', 'T'};

// Matrix container versions: 1 stores float32 values, 2 stores float64 values.
enum class Precision : std::uint32_t { kFloat32 = 1, kFloat64 = 2 };

std::string magic_string(const Magic& magic);

// Little-endian primitives shared by the container formats.
void write_u32_le(std::ostream& out, std::uint32_t value);
void write_u64_le(std::ostream& out, std::uint64_t value);
std::uint32_t read_u32_le(std::istream& in, const std::string& source);
std::uint64_t read_u64_le(std::istream& in, const std::string& source);
void write_magic(std::ostream& out, const Magic& magic);
void expect_magic(std::istream& in, const Magic& magic, const std::string& source);

// Length-prefixed (u64) UTF-8 blob, used for embedded JSON headers.
void write_blob(std::ostream& out, const std::string& bytes);
std::string read_blob(std::istream& in, const std::string& source);

// Matrix container: magic, u32 version, u64 rows, u32 cols, row-major payload (all little-endian).
void write_matrix(std::ostream& out, const Magic& magic, const Matrix& values,
                  Precision precision = Precision::kFloat32);
Matrix read_matrix(std::istream& in, const Magic& magic, const std::string& source = "<stream>");

void write_matrix_file(const std::filesystem::path& path, const Magic& magic, const Matrix& values,
                       Precision precision = Precision::kFloat32);
Matrix read_matrix_file(const std::filesystem::path& path, const Magic& magic);

// Label container: "KLAB", u32 version = 1, u64 n, u32 K, n u32 labels.
void write_labels(std::ostream& out, const Labels& labels, int num_classes);
// Returns the labels and K; K is the header value, or 1 + max(label) when the header stores 0.
std::pair<Labels, int> read_labels(std::istream& in, const std::string& source = "<stream>");

void write_label_file(const std::filesystem::path& path, const Labels& labels, int num_classes);
std::pair<Labels, int> read_label_file(const std::filesystem::path& path);

EmbeddingDataset read_embedding_file(const std::filesystem::path& path);
void write_embedding_file(const std::filesystem::path& path, const Matrix& embeddings);

// Embeddings plus labels from a KEMB/KLAB pair; the row counts must agree.
EmbeddingDataset read_dataset(const std::filesystem::path& embeddings_path,
                              const std::filesystem::path& labels_path);

/// Reads comma-separated rows. When has_label_column is set, the last column is
/// an integer class id. Blank lines and lines starting with '#' are skipped.
EmbeddingDataset read_csv(const std::filesystem::path& path, bool has_label_column);
EmbeddingDataset parse_csv(std::string_view text, bool has_label_column);

struct Split {
  EmbeddingDataset cal;
  EmbeddingDataset test;
  std::vector<std::size_t> cal_indices;
  std::vector<std::size_t> test_indices;
};

/// Uniform shuffle split; |cal| = round(cal_fraction * n). Same seed, same split.
Split split_dataset(const EmbeddingDataset& ds, double cal_fraction, std::uint64_t seed);

ClassPartition class_partition(const Labels& labels, int num_classes);

/// Seeded class-stratified subsample of `total` rows. Each class gets its proportional
/// share, floors first and leftovers to the largest remainders (lower class wins ties).
/// Returns sorted row indices.
std::vector<std::size_t> stratified_subsample(const ClassPartition& partition, std::size_t total,
                                              std::uint64_t seed);

// Rows of ds selected by indices, in the given order.
EmbeddingDataset subset(const EmbeddingDataset& ds, const std::vector<std::size_t>& indices);

}  // namespace kcal
