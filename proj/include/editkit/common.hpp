#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace editkit {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatrixD = Matrix<double>;
using MatrixF = Matrix<float>;
using VectorD = Vector<double>;

/// One point of the toy W+ space: k rows of d-dim latent vectors.
using LatentCode = MatrixD;

/// Raised when an artifact on disk is missing, corrupted, or incompatible.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Seeded random source. Wraps a 64-bit Mersenne twister so that every
/// stochastic operation takes its randomness explicitly.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  /// Uniform integer on the closed range [lo, hi].
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(engine_);
  }
  uint64_t next_u64() { return engine_(); }

  MatrixD normal_matrix(int rows, int cols) {
    MatrixD m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal();
    return m;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

uint64_t splitmix64(uint64_t x);
uint64_t fnv1a64(std::string_view bytes);

/// Child seed = splitmix64(root ^ fnv1a64(name)). Stable across versions.
uint64_t derive_seed(uint64_t root, std::string_view name);

/// Rounds every entry to the nearest float32 so that blob persistence is exact.
void round_to_float(MatrixD& m);
void round_to_float(VectorD& v);

// Tensor blobs: 32-bit IEEE-754 little-endian, row-major.
void write_blob(const std::filesystem::path& path, std::span<const float> values);
std::vector<float> read_blob(const std::filesystem::path& path, size_t expected_count);
void write_matrix_blob(const std::filesystem::path& path, const MatrixD& m);
MatrixD read_matrix_blob(const std::filesystem::path& path, int rows, int cols);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

/// Keeps large blocks on the heap between training/eval steps (glibc only).
void keep_heap_allocations();

}  // namespace editkit
