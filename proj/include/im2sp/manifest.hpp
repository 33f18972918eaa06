#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"

namespace im2sp {

// Manifests are tab-separated text. Lines starting with '#' are comments.
// Relative paths are resolved against the manifest's directory.
//
//   corpus manifest:  id  image.ppm  text words  units.ucu  features.ufm
//   unit manifest:    id  units.ucu      (an id may repeat: several references)

struct corpus_entry {
  std::string id;
  std::string image;
  std::string text; // space-separated caption words
  std::string units;
  std::string features;
};

struct unit_entry {
  std::string id;
  std::string path;
};

namespace detail {

inline std::vector<std::vector<std::string>> read_tsv(const std::string &path, std::size_t columns) {
  std::ifstream in(path);
  if (!in)
    throw format_error("cannot open manifest " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (line.empty() || line[0] == '#')
      continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos)
        break;
      start = tab + 1;
    }
    if (fields.size() != columns)
      throw format_error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(columns) +
                         " tab-separated fields, got " + std::to_string(fields.size()));
    rows.push_back(std::move(fields));
  }
  return rows;
}

inline std::string resolve(const std::string &manifest, const std::string &p) {
  const std::filesystem::path path(p);
  if (path.is_absolute())
    return p;
  return (std::filesystem::path(manifest).parent_path() / path).string();
}

inline void write_text(const std::string &path, const std::string &text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out)
    throw format_error("cannot write " + path);
  out << text;
  if (!out)
    throw format_error("write failed: " + path);
}

} // namespace detail

inline std::vector<corpus_entry> read_corpus_manifest(const std::string &path) {
  std::vector<corpus_entry> out;
  for (auto &f : detail::read_tsv(path, 5))
    out.push_back({f[0], detail::resolve(path, f[1]), f[2], detail::resolve(path, f[3]), detail::resolve(path, f[4])});
  return out;
}

/// Writes entries as given; paths are stored verbatim.
inline void write_corpus_manifest(const std::string &path, const std::vector<corpus_entry> &entries) {
  std::ostringstream os;
  os << "# id\timage\ttext\tunits\tfeatures\n";
  for (const auto &e : entries)
    os << e.id << '\t' << e.image << '\t' << e.text << '\t' << e.units << '\t' << e.features << '\n';
  detail::write_text(path, os.str());
}

inline std::vector<unit_entry> read_unit_manifest(const std::string &path) {
  std::vector<unit_entry> out;
  for (auto &f : detail::read_tsv(path, 2))
    out.push_back({f[0], detail::resolve(path, f[1])});
  return out;
}

inline void write_unit_manifest(const std::string &path, const std::vector<unit_entry> &entries) {
  std::ostringstream os;
  os << "# id\tunits\n";
  for (const auto &e : entries)
    os << e.id << '\t' << e.path << '\n';
  detail::write_text(path, os.str());
}

} // namespace im2sp
