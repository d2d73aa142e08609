#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace adsunet {

// Plain-text `key = value` document. Keys keep insertion order on write;
// '#' starts a comment line.
class KeyValueFile {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  void set(const std::string& key, int value) {
    set(key, static_cast<long long>(value));
  }
  void set(const std::string& key, const std::vector<double>& values);

  bool has(const std::string& key) const { return values_.contains(key); }
  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  const std::vector<std::string>& keys() const { return order_; }

  std::string str() const;
  void write(const std::filesystem::path& path) const;
  static KeyValueFile parse(const std::string& text, const std::string& origin);
  static KeyValueFile read(const std::filesystem::path& path);

  bool operator==(const KeyValueFile& other) const {
    return values_ == other.values_;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
  std::string origin_;
};

// Shortest decimal text that parses back to exactly `v`.
std::string format_exact(double v);
std::vector<std::string> split(const std::string& s, char sep);

}  // namespace adsunet
