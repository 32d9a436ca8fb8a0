#include "ilflow/core/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

#include <json.hpp>

namespace ilflow {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

using nlohmann::json;

namespace {
constexpr int kFormatVersion = 1;
}

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Matrix*>>& entries) {
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["entries"] = json::array();
  for (const auto& [name, m] : entries) {
    manifest["entries"].push_back(
        {{"name", name}, {"shape", {m->rows(), m->cols()}}, {"dtype", "f64"}});
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("checkpoint: cannot open '" + path + "' for writing");
  out << manifest.dump() << '\n';
  std::vector<double> row;
  for (const auto& [name, m] : entries) {
    row.resize(static_cast<std::size_t>(m->cols()));
    for (Index r = 0; r < m->rows(); ++r) {
      for (Index c = 0; c < m->cols(); ++c) row[static_cast<std::size_t>(c)] = (*m)(r, c);
      out.write(reinterpret_cast<const char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(double)));
    }
  }
  if (!out) throw Error("checkpoint: write failed for '" + path + "'");
}

std::map<std::string, Matrix> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error("checkpoint: missing manifest in '" + path + "'");
  json manifest = json::parse(line);
  if (manifest.at("format_version").get<int>() != kFormatVersion) {
    throw Error("checkpoint: unsupported format version in '" + path + "'");
  }
  std::map<std::string, Matrix> out;
  for (const auto& e : manifest.at("entries")) {
    std::string name = e.at("name").get<std::string>();
    Index rows = e.at("shape").at(0).get<Index>();
    Index cols = e.at("shape").at(1).get<Index>();
    if (e.at("dtype").get<std::string>() != "f64") {
      throw Error("checkpoint: unsupported dtype for '" + name + "'");
    }
    Matrix m(rows, cols);
    std::vector<double> row(static_cast<std::size_t>(cols));
    for (Index r = 0; r < rows; ++r) {
      in.read(reinterpret_cast<char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(double)));
      if (!in) throw Error("checkpoint: truncated buffer for '" + name + "'");
      for (Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)];
    }
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

void load_checkpoint_into(const std::string& path,
                          const std::vector<std::pair<std::string, Matrix*>>& entries) {
  auto loaded = load_checkpoint(path);
  for (const auto& [name, m] : entries) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw Error("checkpoint: missing entry '" + name + "'");
    if (it->second.rows() != m->rows() || it->second.cols() != m->cols()) {
      throw Error("checkpoint: shape mismatch for '" + name + "'");
    }
    *m = it->second;
  }
}

}  // namespace ilflow
