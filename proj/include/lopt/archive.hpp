#pragma once

// Line-oriented text container for named float arrays and string attributes.
//
//   <version tag>
//   attr <key> <value to end of line>
//   array <name> <rank> <extent>...
//   <row-major values separated by single spaces>
//   end
//
// Values are written in shortest round-trip form, so load(save(a)) is
// bit-exact. Keys and names are sorted on output.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "lopt/errors.hpp"
#include "lopt/tensor.hpp"

namespace lopt {

inline constexpr std::string_view kWeightsVersion = "lopt-weights-v1";
inline constexpr std::string_view kCheckpointVersion = "lopt-ckpt-v1";
inline constexpr std::string_view kFixtureVersion = "lopt-fixture-v1";

struct NamedArray {
  Shape shape;
  std::vector<double> values;

  Tensor to_tensor(bool requires_grad = false) const { return Tensor(shape, values, requires_grad); }
  static NamedArray from(const Tensor& t) { return {t.shape(), t.to_vector()}; }
};

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw IoError("malformed number '" + std::string(s) + "'");
  }
  return v;
}

class Archive {
 public:
  Archive() = default;
  explicit Archive(std::string version) : version_(std::move(version)) {}

  const std::string& version() const { return version_; }

  void set_attr(const std::string& key, const std::string& value) {
    if (key.empty() || key.find_first_of(" \t\n") != std::string::npos) {
      throw IoError("invalid attribute key '" + key + "'");
    }
    if (value.find('\n') != std::string::npos) {
      throw IoError("attribute '" + key + "' contains a newline");
    }
    attrs_[key] = value;
  }
  bool has_attr(const std::string& key) const { return attrs_.count(key) != 0; }
  const std::string& attr(const std::string& key) const {
    auto it = attrs_.find(key);
    if (it == attrs_.end()) throw IoError("missing attribute '" + key + "'");
    return it->second;
  }
  const std::map<std::string, std::string>& attrs() const { return attrs_; }

  void put(const std::string& name, NamedArray array) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
      throw IoError("invalid array name '" + name + "'");
    }
    if (shape_numel(array.shape) != array.values.size()) {
      throw DimensionError("array '" + name + "' shape " + shape_str(array.shape) +
                           " does not match value count");
    }
    arrays_[name] = std::move(array);
  }
  void put(const std::string& name, const Tensor& t) { put(name, NamedArray::from(t)); }

  bool has(const std::string& name) const { return arrays_.count(name) != 0; }
  const NamedArray& get(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw IoError("missing array '" + name + "'");
    return it->second;
  }
  const std::map<std::string, NamedArray>& arrays() const { return arrays_; }

  std::string serialize() const {
    std::ostringstream out;
    out << version_ << '\n';
    for (const auto& [k, v] : attrs_) out << "attr " << k << ' ' << v << '\n';
    for (const auto& [name, arr] : arrays_) {
      out << "array " << name << ' ' << arr.shape.size();
      for (auto d : arr.shape) out << ' ' << d;
      out << '\n';
      for (std::size_t i = 0; i < arr.values.size(); ++i) {
        if (i) out << ' ';
        out << format_double(arr.values[i]);
      }
      out << '\n';
    }
    out << "end\n";
    return out.str();
  }

  static Archive parse(std::string_view text, std::string_view expected_version = {}) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty archive");
    Archive ar(line);
    if (!expected_version.empty() && line != expected_version) {
      throw IoError("expected version '" + std::string(expected_version) + "', found '" +
                    line + "'");
    }
    bool ended = false;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line == "end") {
        ended = true;
        break;
      }
      if (line.rfind("attr ", 0) == 0) {
        const auto rest = line.substr(5);
        const auto sp = rest.find(' ');
        if (sp == std::string::npos) {
          ar.set_attr(rest, "");
        } else {
          ar.set_attr(rest.substr(0, sp), rest.substr(sp + 1));
        }
      } else if (line.rfind("array ", 0) == 0) {
        std::istringstream header(line.substr(6));
        std::string name;
        std::size_t rank = 0;
        if (!(header >> name >> rank)) throw IoError("malformed array header: " + line);
        NamedArray arr;
        arr.shape.resize(rank);
        for (auto& d : arr.shape) {
          if (!(header >> d)) throw IoError("malformed array header: " + line);
        }
        std::string data;
        if (!std::getline(in, data)) throw IoError("array '" + name + "' has no data line");
        const std::size_t n = shape_numel(arr.shape);
        arr.values.reserve(n);
        std::string_view rest(data);
        while (!rest.empty()) {
          const auto sp = rest.find(' ');
          arr.values.push_back(parse_double(rest.substr(0, sp)));
          if (sp == std::string_view::npos) break;
          rest.remove_prefix(sp + 1);
        }
        if (arr.values.size() != n) {
          throw IoError("array '" + name + "' expected " + std::to_string(n) + " values, found " +
                        std::to_string(arr.values.size()));
        }
        ar.arrays_[name] = std::move(arr);
      } else {
        throw IoError("unrecognized archive line: " + line.substr(0, 40));
      }
    }
    if (!ended) throw IoError("archive truncated (missing 'end')");
    return ar;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << serialize();
    if (!out) throw IoError("write failed for '" + path.string() + "'");
  }

  static Archive load(const std::filesystem::path& path, std::string_view expected_version = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), expected_version);
  }

 private:
  std::string version_;
  std::map<std::string, std::string> attrs_;
  std::map<std::string, NamedArray> arrays_;
};

}  // namespace lopt
