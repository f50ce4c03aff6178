#pragma once

#include <charconv>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace hyperfair {

enum class UserId : std::int64_t {};
enum class ItemId : std::int64_t {};

constexpr std::int64_t raw(UserId id) { return static_cast<std::int64_t>(id); }
constexpr std::int64_t raw(ItemId id) { return static_cast<std::int64_t>(id); }

enum class Group { Protected, Unprotected };

inline std::string_view to_string(Group g)
{
  return g == Group::Protected ? "protected" : "unprotected";
}

constexpr Group other(Group g)
{
  return g == Group::Protected ? Group::Unprotected : Group::Protected;
}

/// A (user, item) cell of the rating matrix.
struct PairKey {
  UserId user{};
  ItemId item{};

  friend auto operator<=>(const PairKey&, const PairKey&) = default;
};

/// One normalized rating in [0,1].
struct Observation {
  UserId user{};
  ItemId item{};
  double value = 0.0;
};

/// Dense map (user,item) -> [0,1] produced by a local predictor or loaded from file.
struct PredictorOutput {
  std::string name;
  std::map<PairKey, double> values;
};

// ---------------------------------------------------------------------------
// Errors. Each maps onto a CLI exit code family.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class StructureError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line)
  {
  }
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class CoverageError : public DataError {
 public:
  using DataError::DataError;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Number formatting helpers shared by the text formats.

/// Shortest representation that parses back to the identical double.
inline std::string format_double(double v)
{
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
bool parse_number(std::string_view s, T& out)
{
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc{} && res.ptr == s.data() + s.size();
}

/// Splits on `delim`; fields are views into `line`.
inline std::vector<std::string_view> split_fields(std::string_view line, std::string_view delim = ",")
{
  std::vector<std::string_view> f;
  for (std::size_t pos; (pos = line.find(delim)) != std::string_view::npos; line.remove_prefix(pos + delim.size()))
    f.push_back(line.substr(0, pos));
  f.push_back(line);
  return f;
}

}  // namespace hyperfair

template <>
struct std::hash<hyperfair::PairKey> {
  std::size_t operator()(const hyperfair::PairKey& k) const noexcept
  {
    auto a = static_cast<std::uint64_t>(hyperfair::raw(k.user));
    auto b = static_cast<std::uint64_t>(hyperfair::raw(k.item));
    return static_cast<std::size_t>(a * 0x9E3779B97F4A7C15ULL ^ (b + 0x7F4A7C15ULL + (a << 6) + (a >> 2)));
  }
};
