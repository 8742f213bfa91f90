#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mmlqg/types.hpp"

namespace mmlqg {

// Versioned plain-text container for named matrices. Each entry is a header
// line "name rows cols" followed by the rows in row-major order, printed with
// 17 significant digits so finite doubles round-trip bitwise.
class MatrixArchive {
 public:
  void put(const std::string& name, const Matrix& value);
  void put_scalar(const std::string& name, double value);

  bool contains(const std::string& name) const;
  const Matrix& get(const std::string& name) const;
  double get_scalar(const std::string& name) const;

  const std::vector<std::pair<std::string, Matrix>>& entries() const {
    return entries_;
  }

  std::string to_text() const;
  static MatrixArchive from_text(const std::string& text);

  void save(const std::string& path) const;
  static MatrixArchive load(const std::string& path);

 private:
  std::vector<std::pair<std::string, Matrix>> entries_;
};

// 17-significant-digit formatting used by the archive and the CSV writers.
std::string format_double(double value);

}  // namespace mmlqg
