#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace dnpo {

// Dense row-major matrix of doubles. Vectors are 1xN or Nx1 matrices.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {
    if (r < 0 || c < 0) throw std::invalid_argument("Mat: negative dimensions");
  }
  Mat(int r, int c, std::vector<double> d) : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != static_cast<size_t>(r) * c)
      throw std::invalid_argument("Mat: data size does not match shape");
  }

  static Mat full(int r, int c, double v) {
    Mat m(r, c);
    for (auto& x : m.data) x = v;
    return m;
  }

  double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  size_t size() const { return data.size(); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

  // Rows [begin, begin+count) as a new matrix.
  Mat slice_rows(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > rows)
      throw std::invalid_argument("Mat::slice_rows: range out of bounds");
    Mat out(count, cols);
    std::copy(data.begin() + static_cast<size_t>(begin) * cols,
              data.begin() + static_cast<size_t>(begin + count) * cols, out.data.begin());
    return out;
  }
};

inline std::string shape_str(const Mat& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

}  // namespace dnpo
