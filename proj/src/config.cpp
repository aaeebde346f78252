#include "dpu/config.hpp"

#include <fstream>
#include <sstream>

#include "dpu/error.hpp"
#include "dpu/rng.hpp"

namespace dpu {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

ConfigMap ConfigMap::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_text(ss.str());
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

ConfigMap ConfigMap::parse_text(const std::string& text) {
  ConfigMap cfg;
  std::stringstream in(text);
  std::string line;
  std::string section;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto colon = line.find(':');
    if (colon == std::string::npos)
      throw ValidationError("line " + std::to_string(lineno) + ": expected 'key: value'");
    const std::string key = trim(line.substr(0, colon));
    const std::string value = trim(line.substr(colon + 1));
    if (key.empty())
      throw ValidationError("line " + std::to_string(lineno) + ": empty key");
    cfg.entries_[section.empty() ? key : section + "." + key] = value;
  }
  return cfg;
}

bool ConfigMap::has(const std::string& key) const { return entries_.count(key) > 0; }

std::string ConfigMap::get_string(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ValidationError("missing config key '" + key + "'");
  return it->second;
}

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

int64_t ConfigMap::get_int(const std::string& key) const {
  const std::string v = get_string(key);
  try {
    return std::stoll(v);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

int64_t ConfigMap::get_int(const std::string& key, int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

uint64_t ConfigMap::get_u64(const std::string& key, uint64_t fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get_string(key);
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected unsigned integer, got '" + v +
                          "'");
  }
}

double ConfigMap::get_real(const std::string& key) const {
  const std::string v = get_string(key);
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

double ConfigMap::get_real(const std::string& key, double fallback) const {
  return has(key) ? get_real(key) : fallback;
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string v = get_string(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config key '" + key + "': expected boolean, got '" + v + "'");
}

std::vector<int> ConfigMap::get_int_list(const std::string& key,
                                         const std::vector<int>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<int> out;
  std::stringstream ss(get_string(key));
  std::string token;
  while (ss >> token) {
    try {
      out.push_back(std::stoi(token));
    } catch (const std::exception&) {
      throw ValidationError("config key '" + key + "': expected integer list");
    }
  }
  return out;
}

std::vector<double> ConfigMap::get_real_list(const std::string& key,
                                             const std::vector<double>& fallback) const {
  if (!has(key)) return fallback;
  std::vector<double> out;
  std::stringstream ss(get_string(key));
  std::string token;
  while (ss >> token) {
    try {
      out.push_back(std::stod(token));
    } catch (const std::exception&) {
      throw ValidationError("config key '" + key + "': expected number list");
    }
  }
  return out;
}

std::string ConfigMap::canonical_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) {
    out += k;
    out += ": ";
    out += v;
    out += '\n';
  }
  return out;
}

uint64_t ConfigMap::hash() const { return fnv1a64(canonical_text()); }

void ConfigMap::set(const std::string& key, const std::string& value) {
  entries_[key] = value;
}

}  // namespace dpu
