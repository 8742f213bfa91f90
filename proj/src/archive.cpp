#include "mmlqg/archive.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace mmlqg {
namespace {

constexpr const char* kMagic = "mmlqg-archive";
constexpr int kVersion = 1;

}  // namespace

std::string format_double(double value) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  return buf;
}

void MatrixArchive::put(const std::string& name, const Matrix& value) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
    throw ConfigError("archive entry name must be non-empty and have no whitespace: '" + name + "'");
  for (auto& e : entries_) {
    if (e.first == name) {
      e.second = value;
      return;
    }
  }
  entries_.emplace_back(name, value);
}

void MatrixArchive::put_scalar(const std::string& name, double value) {
  Matrix m(1, 1);
  m(0, 0) = value;
  put(name, m);
}

bool MatrixArchive::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return true;
  return false;
}

const Matrix& MatrixArchive::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return e.second;
  throw ConfigError("archive has no entry named '" + name + "'");
}

double MatrixArchive::get_scalar(const std::string& name) const {
  const Matrix& m = get(name);
  if (m.rows() != 1 || m.cols() != 1)
    throw ConfigError("archive entry '" + name + "' is not a scalar");
  return m(0, 0);
}

std::string MatrixArchive::to_text() const {
  std::ostringstream out;
  out << kMagic << " " << kVersion << "\n";
  for (const auto& [name, m] : entries_) {
    out << name << " " << m.rows() << " " << m.cols() << "\n";
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        if (j) out << " ";
        out << format_double(m(i, j));
      }
      out << "\n";
    }
  }
  return out.str();
}

MatrixArchive MatrixArchive::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kMagic)
    throw ConfigError("not a matrix archive (bad magic)");
  if (version != kVersion)
    throw ConfigError("unsupported archive version " + std::to_string(version));

  MatrixArchive archive;
  std::string name;
  while (in >> name) {
    Eigen::Index rows = 0, cols = 0;
    if (!(in >> rows >> cols) || rows < 0 || cols < 0)
      throw ConfigError("archive entry '" + name + "' has a malformed header");
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j)
        if (!(in >> m(i, j)))
          throw ConfigError("archive entry '" + name + "' is truncated");
    archive.entries_.emplace_back(name, std::move(m));
  }
  return archive;
}

void MatrixArchive::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open '" + path + "' for writing");
  out << to_text();
  if (!out) throw ConfigError("failed writing '" + path + "'");
}

MatrixArchive MatrixArchive::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return from_text(buffer.str());
}

}  // namespace mmlqg
