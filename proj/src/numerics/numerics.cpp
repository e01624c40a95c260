#include "kwash/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "kwash/error.hpp"
#include "kwash/kernels.hpp"
#include "kwash/random.hpp"

namespace kwash::numerics {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorKind::kShapeMismatch,
                std::string(what) + ": " + std::to_string(a.rows()) + "x" +
                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                    "x" + std::to_string(b.cols()));
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw Error(ErrorKind::kShapeMismatch,
                "matrix data length " + std::to_string(data_.size()) +
                    " != " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (!all_finite(data_)) throw Error(ErrorKind::kFormat, "non-finite matrix entry");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw Error(ErrorKind::kShapeMismatch, "ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

std::vector<double> Matrix::column(std::size_t j) const {
  std::vector<double> out(rows_);
  for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
  return out;
}

void Matrix::set_column(std::size_t j, std::span<const double> values) {
  if (values.size() != rows_) throw Error(ErrorKind::kShapeMismatch, "set_column");
  for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = values[i];
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "matrix +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "matrix -=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw Error(ErrorKind::kShapeMismatch, "matmul");
  Matrix c(a.rows(), b.cols());
  kernels::parallel::gemm_nn(a.data(), b.data(), c.data(), a.rows(), b.cols(),
                             a.cols(), false);
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw Error(ErrorKind::kShapeMismatch, "matmul_nt");
  Matrix c(a.rows(), b.rows());
  kernels::parallel::gemm_nt(a.data(), b.data(), c.data(), a.rows(), b.rows(),
                             a.cols(), false);
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw Error(ErrorKind::kShapeMismatch, "matmul_tn");
  Matrix c(a.cols(), b.cols());
  kernels::parallel::gemm_tn(a.data(), b.data(), c.data(), a.cols(), b.cols(),
                             a.rows(), false);
  return c;
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw Error(ErrorKind::kShapeMismatch, "matvec");
  std::vector<double> y(a.rows());
  kernels::parallel::gemm_nt(a.data(), x, y, a.rows(), 1, a.cols(), false);
  return y;
}

Matrix hconcat(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw Error(ErrorKind::kShapeMismatch, "hconcat");
  Matrix c(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), c.row(i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(),
              c.row(i).begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return c;
}

double frobenius_sq(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data()) s += x * x;
  return s;
}

double trace(const Matrix& m) {
  double s = 0.0;
  const std::size_t n = std::min(m.rows(), m.cols());
  for (std::size_t i = 0; i < n; ++i) s += m(i, i);
  return s;
}

double norm2(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s);
}

double relative_frobenius_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "relative_frobenius_diff");
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    num += d * d;
  }
  const double den = std::max(frobenius_sq(b), std::numeric_limits<double>::min());
  return std::sqrt(num / den);
}

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}

SymmetricPSD::SymmetricPSD(Matrix m) : m_(std::move(m)) {
  const std::size_t n = m_.rows();
  if (m_.cols() != n) throw Error(ErrorKind::kFormat, "SymmetricPSD: not square");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double a = m_(i, j);
      if (std::abs(a - m_(j, i)) > 1e-9 * std::max(1.0, std::abs(a))) {
        throw Error(ErrorKind::kFormat, "SymmetricPSD: not symmetric");
      }
    }
  }
  const double tr = trace(m_);
  if (tr < 0.0) throw Error(ErrorKind::kFormat, "SymmetricPSD: negative trace");
  if (tr == 0.0) {
    // A PSD matrix with zero trace is the zero matrix.
    for (double x : m_.data()) {
      if (x != 0.0) throw Error(ErrorKind::kFormat, "SymmetricPSD: not PSD");
    }
    return;
  }
  // λ_min ≥ −1e-8·tr  ⇔  A + 1e-8·tr·I ⪰ 0; the factor 2 admits the boundary.
  Matrix shifted = m_;
  for (std::size_t i = 0; i < n; ++i) shifted(i, i) += 2e-8 * tr;
  try {
    Cholesky probe(shifted);
  } catch (const Error&) {
    throw Error(ErrorKind::kFormat, "SymmetricPSD: eigenvalue below -1e-8*trace");
  }
}

Cholesky::Cholesky(const Matrix& a) : l_(a.rows(), a.cols()) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw Error(ErrorKind::kShapeMismatch, "Cholesky: not square");
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    const auto lj = l_.row(j);
    for (std::size_t p = 0; p < j; ++p) d -= lj[p] * lj[p];
    if (!(d > 0.0)) {
      throw Error(ErrorKind::kSingularSystem,
                  "non-positive pivot at " + std::to_string(j));
    }
    const double ljj = std::sqrt(d);
    l_(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      const auto li = l_.row(i);
      double s = a(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= li[p] * lj[p];
      l_(i, j) = s / ljj;
    }
  }
}

double Cholesky::condition_estimate() const {
  double lo = std::numeric_limits<double>::infinity();
  double hi = 0.0;
  for (std::size_t i = 0; i < dim(); ++i) {
    lo = std::min(lo, l_(i, i));
    hi = std::max(hi, l_(i, i));
  }
  if (dim() == 0) return 1.0;
  const double r = hi / lo;
  return r * r;
}

std::vector<double> Cholesky::forward(std::span<const double> b) const {
  const std::size_t n = dim();
  std::vector<double> y(b.begin(), b.end());
  for (std::size_t i = 0; i < n; ++i) {
    const auto li = l_.row(i);
    double s = y[i];
    for (std::size_t p = 0; p < i; ++p) s -= li[p] * y[p];
    y[i] = s / li[i];
  }
  return y;
}

std::vector<double> Cholesky::backward(std::span<const double> b) const {
  const std::size_t n = dim();
  std::vector<double> x(b.begin(), b.end());
  for (std::size_t ii = n; ii-- > 0;) {
    double s = x[ii];
    for (std::size_t p = ii + 1; p < n; ++p) s -= l_(p, ii) * x[p];
    x[ii] = s / l_(ii, ii);
  }
  return x;
}

std::vector<double> Cholesky::solve(std::span<const double> b) const {
  if (b.size() != dim()) throw Error(ErrorKind::kShapeMismatch, "Cholesky::solve");
  return backward(forward(b));
}

Matrix Cholesky::solve(const Matrix& b) const {
  if (b.rows() != dim()) throw Error(ErrorKind::kShapeMismatch, "Cholesky::solve");
  Matrix x(b.rows(), b.cols());
  for (std::size_t j = 0; j < b.cols(); ++j) x.set_column(j, solve(b.column(j)));
  return x;
}

Matrix Cholesky::solve_right(const Matrix& b) const {
  if (b.cols() != dim()) {
    throw Error(ErrorKind::kShapeMismatch, "Cholesky::solve_right");
  }
  Matrix x(b.rows(), b.cols());
  for (std::size_t i = 0; i < b.rows(); ++i) {
    const auto xi = solve(b.row(i));
    std::copy(xi.begin(), xi.end(), x.row(i).begin());
  }
  return x;
}

Matrix least_squares_fit(const Matrix& keys, const Matrix& values, double ridge) {
  if (keys.cols() != values.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "least_squares_fit: column counts differ");
  }
  if (keys.cols() == 0) throw Error(ErrorKind::kShapeMismatch, "least_squares_fit: n = 0");
  if (ridge < 0.0) throw Error(ErrorKind::kConfig, "least_squares_fit: ridge < 0");
  Matrix gram = matmul_nt(keys, keys);
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) += ridge;
  const Matrix rhs = matmul_nt(values, keys);  // V·Kᵀ, d1×d2
  try {
    Cholesky chol(gram);
    if (ridge == 0.0 && chol.condition_estimate() > kSingularConditionThreshold) {
      throw Error(ErrorKind::kSingularSystem, "K·Kᵀ condition estimate above 1e12");
    }
    return chol.solve_right(rhs);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kSingularSystem) {
      throw Error(ErrorKind::kSingularSystem,
                  std::string("least_squares_fit: ") + e.what());
    }
    throw;
  }
}

Eigenpair top_generalized_eigenpair(const SymmetricPSD& a, const SymmetricPSD& b,
                                    double eps) {
  const std::size_t n = a.dim();
  if (b.dim() != n) throw Error(ErrorKind::kShapeMismatch, "eigenpair: dims differ");
  if (n == 0) return {};
  Matrix reg = b.matrix();
  for (std::size_t i = 0; i < n; ++i) reg(i, i) += eps;
  std::optional<Cholesky> chol;
  try {
    chol.emplace(reg);
  } catch (const Error&) {
    throw Error(ErrorKind::kNoConvergence,
                "B + eps*I is not positive definite; raise eps");
  }

  // Whitened operator S = L⁻¹·A·L⁻ᵀ.
  Matrix half(n, n);  // rows of half are (L⁻¹·A)ᵀ rows = A·L⁻ᵀ rows
  for (std::size_t j = 0; j < n; ++j) {
    const auto col = chol->forward(a.matrix().column(j));
    for (std::size_t i = 0; i < n; ++i) half(j, i) = col[i];  // (L⁻¹A)ᵀ
  }
  Matrix s(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    const auto col = chol->forward(half.column(j));
    s.set_column(j, col);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double m = 0.5 * (s(i, j) + s(j, i));
      s(i, j) = m;
      s(j, i) = m;
    }
  }

  Rng rng(0x5eedULL);
  std::vector<double> y(n);
  for (double& v : y) v = 0.5 + rng.uniform();
  double ny = norm2(y);
  for (double& v : y) v /= ny;

  Eigenpair out;
  for (int it = 1; it <= kEigenMaxIterations; ++it) {
    auto z = matvec(s, y);
    const double lambda = kernels::parallel::dot(y, z);
    const double nz = norm2(z);
    double resid = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = z[i] - lambda * y[i];
      resid += r * r;
    }
    resid = std::sqrt(resid);
    const bool zero_operator = nz == 0.0;
    if (zero_operator || resid <= kEigenRelativeTolerance * std::abs(lambda)) {
      out.value = zero_operator ? 0.0 : lambda;
      out.iterations = it;
      auto v = chol->backward(y);
      const double nv = norm2(v);
      for (double& x : v) x /= nv;
      out.vector = std::move(v);
      return out;
    }
    for (std::size_t i = 0; i < n; ++i) y[i] = z[i] / nz;
  }
  throw Error(ErrorKind::kNoConvergence,
              "power iteration hit the cap of " + std::to_string(kEigenMaxIterations));
}

}  // namespace kwash::numerics
