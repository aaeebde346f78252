#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dpu {

// Plain-text "key: value" file with [section] headers and # comments. Keys
// are flattened to "section.key"; keys before any section keep their bare
// name.
class ConfigMap {
 public:
  static ConfigMap parse_file(const std::string& path);
  static ConfigMap parse_text(const std::string& text);

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  double get_real(const std::string& key) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const;
  std::vector<double> get_real_list(const std::string& key,
                                    const std::vector<double>& fallback) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

  // Canonical "key: value" dump, sorted by key; hashed into report metadata.
  std::string canonical_text() const;
  uint64_t hash() const;

  void set(const std::string& key, const std::string& value);

 private:
  std::map<std::string, std::string> entries_;
};

}  // namespace dpu
