#pragma once

// Experiment bundles in TOML, parsed by toml++. Tables flatten to dotted keys
// ("train.epochs"); the same syntax overrides values from the command line
// ("train.epochs=5").

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "modguard/error.hpp"

namespace modguard::config {

struct Value;
using Array = std::vector<Value>;

struct Value {
  std::variant<bool, double, std::string, Array> v;
};

namespace detail {

inline Value convert(const toml::node& n, const std::string& key) {
  if (const auto* b = n.as_boolean()) return {b->get()};
  if (const auto* i = n.as_integer()) return {static_cast<double>(i->get())};
  if (const auto* f = n.as_floating_point()) return {f->get()};
  if (const auto* s = n.as_string()) return {s->get()};
  if (const auto* a = n.as_array()) {
    Array out;
    for (const auto& e : *a) out.push_back(convert(e, key));
    return {std::move(out)};
  }
  throw FormatError("config key " + key + " has an unsupported value type");
}

inline void flatten(const toml::table& t, const std::string& prefix, std::map<std::string, Value>& out) {
  for (const auto& [k, node] : t) {
    const auto key = prefix.empty() ? std::string(k.str()) : prefix + "." + std::string(k.str());
    if (const auto* sub = node.as_table())
      flatten(*sub, key, out);
    else
      out[key] = convert(node, key);
  }
}

inline toml::table parse_toml(std::string_view text, std::string_view source) {
  try {
    return toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << " line " << e.source().begin.line << ": " << e.description();
    throw FormatError(os.str());
  }
}

inline std::string render(const Value& v) {
  struct {
    std::string operator()(bool b) const { return b ? "true" : "false"; }
    std::string operator()(double d) const {
      if (std::isinf(d)) return d < 0 ? "-inf" : "inf";
      std::ostringstream os;
      os.precision(17);
      os << d;
      return os.str();
    }
    std::string operator()(const std::string& s) const { return '"' + s + '"'; }
    std::string operator()(const Array& a) const {
      std::string out = "[";
      for (std::size_t i = 0; i < a.size(); ++i) out += (i ? ", " : "") + render(a[i]);
      return out + "]";
    }
  } visitor;
  return std::visit(visitor, v.v);
}

} // namespace detail

class Config {
public:
  static Config parse(std::string_view text, std::string_view source = "config") {
    Config c;
    detail::flatten(detail::parse_toml(text, source), "", c.values_);
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  /// Apply "section.key=value".
  void override_with(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw InvalidArgument("override must look like section.key=value");
    auto key = std::string(assignment.substr(0, eq));
    while (!key.empty() && key.back() == ' ') key.pop_back();
    while (!key.empty() && key.front() == ' ') key.erase(0, 1);
    if (key.empty()) throw InvalidArgument("override has an empty key");
    const auto t = detail::parse_toml("v = " + std::string(assignment.substr(eq + 1)), "override " + key);
    values_[key] = detail::convert(*t.get("v"), key);
  }

  void set(const std::string& key, Value v) { values_[key] = std::move(v); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  double number(const std::string& key, double fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    if (const auto* d = std::get_if<double>(&v->v)) return *d;
    throw FormatError("config key " + key + " must be a number");
  }

  std::size_t count(const std::string& key, std::size_t fallback) const {
    const double d = number(key, static_cast<double>(fallback));
    if (!(d >= 0.0) || d != std::floor(d) || d > 9.0e15)
      throw FormatError("config key " + key + " must be a non-negative integer");
    return static_cast<std::size_t>(d);
  }

  std::uint64_t seed(const std::string& key) const {
    if (!has(key)) throw FormatError("config key " + key + " is required");
    return static_cast<std::uint64_t>(count(key, 0));
  }

  bool flag(const std::string& key, bool fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    if (const auto* b = std::get_if<bool>(&v->v)) return *b;
    throw FormatError("config key " + key + " must be true or false");
  }

  std::string text(const std::string& key, const std::string& fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    if (const auto* s = std::get_if<std::string>(&v->v)) return *s;
    throw FormatError("config key " + key + " must be a string");
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    const auto* a = std::get_if<Array>(&v->v);
    if (!a) throw FormatError("config key " + key + " must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : *a) {
      const auto* d = std::get_if<double>(&e.v);
      if (!d) throw FormatError("config key " + key + " must be an array of numbers");
      out.push_back(*d);
    }
    return out;
  }

  std::vector<std::string> texts(const std::string& key, std::vector<std::string> fallback) const {
    const auto* v = find(key);
    if (!v) return fallback;
    const auto* a = std::get_if<Array>(&v->v);
    if (!a) throw FormatError("config key " + key + " must be an array of strings");
    std::vector<std::string> out;
    for (const auto& e : *a) {
      const auto* s = std::get_if<std::string>(&e.v);
      if (!s) throw FormatError("config key " + key + " must be an array of strings");
      out.push_back(*s);
    }
    return out;
  }

  /// Keys present in the file but never read; typos surface here.
  std::vector<std::string> unused_keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!read_.count(k)) out.push_back(k);
    return out;
  }

  /// Sorted key = value lines; the basis of the config hash.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + detail::render(v) + "\n";
    return out;
  }

private:
  const Value* find(const std::string& key) const {
    read_.insert(key);
    const auto it = values_.find(key);
    return it == values_.end() ? nullptr : &it->second;
  }

  std::map<std::string, Value> values_;
  mutable std::set<std::string> read_;
};

} // namespace modguard::config
