#pragma once

// Dense linear algebra shared by the editor, the washer and their oracles.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace kwash::numerics {

// Row-major dense matrix of finite doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  // Throws ShapeMismatch if data.size() != rows*cols, Format on non-finite.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }

  std::vector<double> column(std::size_t j) const;
  void set_column(std::size_t j, std::span<const double> values);

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

Matrix transpose(const Matrix& a);
Matrix matmul(const Matrix& a, const Matrix& b);     // A·B
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // A·Bᵀ
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // Aᵀ·B
std::vector<double> matvec(const Matrix& a, std::span<const double> x);
// Columns of `a` and `b` placed side by side.
Matrix hconcat(const Matrix& a, const Matrix& b);

double frobenius_sq(const Matrix& m);
double trace(const Matrix& m);
double norm2(std::span<const double> x);
// ||a − b||_F / max(||b||_F, tiny).
double relative_frobenius_diff(const Matrix& a, const Matrix& b);
bool all_finite(std::span<const double> x);

// Symmetric positive-semidefinite matrix; validated on construction.
class SymmetricPSD {
 public:
  SymmetricPSD() = default;
  // Throws Format if `m` is not square, not symmetric within
  // 1e-9·max(1,|a_ij|), or has an eigenvalue below −1e-8·trace.
  explicit SymmetricPSD(Matrix m);

  std::size_t dim() const { return m_.rows(); }
  const Matrix& matrix() const { return m_; }
  double operator()(std::size_t i, std::size_t j) const { return m_(i, j); }

 private:
  Matrix m_;
};

// Lower-triangular Cholesky factor L with A = L·Lᵀ.
class Cholesky {
 public:
  // Throws SingularSystem when a pivot is not strictly positive.
  explicit Cholesky(const Matrix& a);

  std::size_t dim() const { return l_.rows(); }
  const Matrix& lower() const { return l_; }
  // (max L_ii / min L_ii)², a cheap lower bound on the 2-norm condition number.
  double condition_estimate() const;

  std::vector<double> solve(std::span<const double> b) const;
  // Solves A·X = B column by column.
  Matrix solve(const Matrix& b) const;
  // Solves X·A = B (row by row, A symmetric).
  Matrix solve_right(const Matrix& b) const;
  // L⁻¹·b and L⁻ᵀ·b.
  std::vector<double> forward(std::span<const double> b) const;
  std::vector<double> backward(std::span<const double> b) const;

 private:
  Matrix l_;
};

inline constexpr double kSingularConditionThreshold = 1e12;

// W minimizing ||W·K − V||² + ridge·||W||², via a Cholesky factorization of
// K·Kᵀ + ridge·I. K is d2×n, V is d1×n, W is d1×d2.
// Throws SingularSystem when ridge = 0 and K·Kᵀ is numerically singular.
Matrix least_squares_fit(const Matrix& keys, const Matrix& values, double ridge);

struct Eigenpair {
  double value = 0.0;
  std::vector<double> vector;  // unit 2-norm
  int iterations = 0;
};

inline constexpr int kEigenMaxIterations = 10000;
inline constexpr double kEigenRelativeTolerance = 1e-10;

// Largest λ with A·v = λ·(B + eps·I)·v by power iteration on the whitened
// operator L⁻¹·A·L⁻ᵀ where B + eps·I = L·Lᵀ.
// Throws NoConvergence if B + eps·I is not positive definite or the
// iteration cap is hit.
Eigenpair top_generalized_eigenpair(const SymmetricPSD& a, const SymmetricPSD& b,
                                    double eps);

}  // namespace kwash::numerics
