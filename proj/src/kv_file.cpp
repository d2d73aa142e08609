#include "adsunet/kv_file.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "adsunet/errors.hpp"

namespace adsunet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_exact(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(trim(cur));
  return out;
}

void KeyValueFile::set(const std::string& key, const std::string& value) {
  if (!values_.contains(key)) order_.push_back(key);
  values_[key] = value;
}

void KeyValueFile::set(const std::string& key, double value) {
  set(key, format_exact(value));
}

void KeyValueFile::set(const std::string& key, long long value) {
  set(key, std::to_string(value));
}

void KeyValueFile::set(const std::string& key,
                       const std::vector<double>& values) {
  std::string s;
  for (std::size_t k = 0; k < values.size(); ++k) {
    if (k) s += ",";
    s += format_exact(values[k]);
  }
  set(key, s);
}

const std::string& KeyValueFile::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) {
    throw IoError("missing key '" + key + "' in " +
                  (origin_.empty() ? std::string("key/value document") : origin_));
  }
  return it->second;
}

double KeyValueFile::get_double(const std::string& key) const {
  const auto& s = get(key);
  double v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw IoError("key '" + key + "' is not a number: " + s);
  }
  return v;
}

long long KeyValueFile::get_int(const std::string& key) const {
  const auto& s = get(key);
  long long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw IoError("key '" + key + "' is not an integer: " + s);
  }
  return v;
}

std::vector<double> KeyValueFile::get_doubles(const std::string& key) const {
  std::vector<double> out;
  for (const auto& part : split(get(key), ',')) {
    double v = 0;
    auto res = std::from_chars(part.data(), part.data() + part.size(), v);
    if (res.ec != std::errc()) {
      throw IoError("key '" + key + "' holds a non-number: " + part);
    }
    out.push_back(v);
  }
  return out;
}

std::string KeyValueFile::str() const {
  std::ostringstream os;
  for (const auto& key : order_) os << key << " = " << values_.at(key) << "\n";
  return os.str();
}

void KeyValueFile::write(const std::filesystem::path& path) const {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw IoError("cannot write " + path.string());
    os << str();
  }
  std::filesystem::rename(tmp, path);
}

KeyValueFile KeyValueFile::parse(const std::string& text,
                                 const std::string& origin) {
  KeyValueFile out;
  out.origin_ = origin;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw IoError(origin + ":" + std::to_string(lineno) +
                    ": expected 'key = value'");
    }
    out.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return out;
}

KeyValueFile KeyValueFile::read(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path.string());
}

}  // namespace adsunet
