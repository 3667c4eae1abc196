#include "lbd/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "lbd/error.hpp"

#ifndef LBD_VERSION_STRING
#define LBD_VERSION_STRING "0.0.0"
#endif
#ifndef LBD_GIT_HASH_STRING
#define LBD_GIT_HASH_STRING "unknown"
#endif

namespace lbd {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

void atomic_write_text(const std::string& text, const std::filesystem::path& path) {
  std::error_code ec;
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed for " + path.string() + ": " + ec.message());
}

}  // namespace

void write_csv_atomic(const CsvTable& table, const std::filesystem::path& path) {
  std::ostringstream out;
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    if (c) out << ',';
    out << table.header[c];
  }
  out << '\n';
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) {
      throw IoError("csv row width mismatch for " + path.string());
    }
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << ',';
      out << row[c];
    }
    out << '\n';
  }
  atomic_write_text(out.str(), path);
}

std::string library_version() { return LBD_VERSION_STRING; }
std::string build_git_hash() { return LBD_GIT_HASH_STRING; }

RunRecord make_run_record() {
  RunRecord r;
  r.library_version = library_version();
  r.git_hash = build_git_hash();
  return r;
}

void write_run_record(const RunRecord& record, const std::filesystem::path& path) {
  nlohmann::json j;
  j["schema_version"] = record.schema_version;
  j["config"] = record.config;
  j["metrics"]["final"] = record.metrics;
  j["metrics"]["epochs"] = record.epochs;
  j["metadata"] = record.metadata;
  j["timing"]["wall_seconds"] = record.wall_seconds;
  j["library_version"] = record.library_version;
  j["git_hash"] = record.git_hash;
  atomic_write_text(j.dump(2) + "\n", path);
}

RunRecord read_run_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run record: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    RunRecord r;
    r.schema_version = j.at("schema_version").get<int>();
    r.config = j.at("config").get<std::map<std::string, std::string>>();
    r.metrics = j.at("metrics").at("final").get<std::map<std::string, double>>();
    r.epochs =
        j.at("metrics").at("epochs").get<std::vector<std::map<std::string, double>>>();
    r.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
    r.wall_seconds = j.at("timing").at("wall_seconds").get<double>();
    r.library_version = j.at("library_version").get<std::string>();
    r.git_hash = j.at("git_hash").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed run record " + path.string() + ": " + e.what());
  }
}

}  // namespace lbd
