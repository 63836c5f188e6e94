#include "fmbff/config_file.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>

namespace fmbff {

namespace {

using Numbers = std::vector<double>;

struct Codec {
  std::function<Numbers(const std::string&)> parse;
  std::function<std::string(const Numbers&)> format;
  std::size_t arity;
};

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t at = 0;
  for (;;) {
    const std::size_t next = s.find(sep, at);
    out.push_back(trim(std::string_view(s).substr(at, next == std::string::npos ? std::string::npos : next - at)));
    if (next == std::string::npos) return out;
    at = next + 1;
  }
}

std::int64_t parse_int(const std::string& s) {
  std::int64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError("expected an integer, got '" + s + "'");
  if (std::abs(v) > (std::int64_t{1} << 52)) throw ConfigError("integer out of range: " + s);
  return v;
}

std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError("expected an unsigned integer, got '" + s + "'");
  return v;
}

double parse_real(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw ConfigError("expected a finite number, got '" + s + "'");
  }
  return v;
}

std::string int_str(double v) { return std::to_string(static_cast<std::int64_t>(v)); }

std::string real_str(double v) {
  // Shortest text that parses back to the same double.
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

const Codec integer{[](const std::string& s) { return Numbers{double(parse_int(s))}; },
                    [](const Numbers& n) { return int_str(n[0]); }, 1};
const Codec real{[](const std::string& s) { return Numbers{parse_real(s)}; },
                 [](const Numbers& n) { return real_str(n[0]); }, 1};
const Codec boolean{[](const std::string& s) {
                      if (s == "true" || s == "1") return Numbers{1};
                      if (s == "false" || s == "0") return Numbers{0};
                      throw ConfigError("expected true or false, got '" + s + "'");
                    },
                    [](const Numbers& n) { return std::string(n[0] != 0 ? "true" : "false"); }, 1};
const Codec seed{[](const std::string& s) {
                   const std::uint64_t v = parse_u64(s);
                   return Numbers{double(v & 0xffffffffULL), double(v >> 32)};
                 },
                 [](const Numbers& n) {
                   return std::to_string(static_cast<std::uint64_t>(n[0]) | (static_cast<std::uint64_t>(n[1]) << 32));
                 },
                 2};
const Codec widths{[](const std::string& s) {
                     const auto parts = split_list(s, ',');
                     if (parts.size() != 4) throw ConfigError("expected 4 comma-separated widths, got '" + s + "'");
                     Numbers n;
                     for (const auto& p : parts) n.push_back(double(parse_int(p)));
                     return n;
                   },
                   [](const Numbers& n) {
                     return int_str(n[0]) + "," + int_str(n[1]) + "," + int_str(n[2]) + "," + int_str(n[3]);
                   },
                   4};
const Codec size{[](const std::string& s) {
                   const auto parts = split_list(s, 'x');
                   if (parts.size() == 1) return Numbers{double(parse_int(parts[0])), double(parse_int(parts[0]))};
                   if (parts.size() == 2) return Numbers{double(parse_int(parts[0])), double(parse_int(parts[1]))};
                   throw ConfigError("expected H or HxW, got '" + s + "'");
                 },
                 [](const Numbers& n) { return int_str(n[0]) + "x" + int_str(n[1]); }, 2};

Codec enumeration(std::vector<std::string> names) {
  return {[names](const std::string& s) {
            for (std::size_t i = 0; i < names.size(); ++i)
              if (names[i] == s) return Numbers{double(i)};
            std::string all;
            for (const auto& n : names) all += (all.empty() ? "" : "|") + n;
            throw ConfigError("expected one of " + all + ", got '" + s + "'");
          },
          [names](const Numbers& n) {
            const auto i = static_cast<std::size_t>(n[0]);
            if (n[0] < 0 || i >= names.size()) throw ConfigError("enumeration index out of range");
            return names[i];
          },
          1};
}

struct Field {
  std::string key;
  Codec codec;
  std::function<Numbers(const RunConfig&)> get;
  std::function<void(RunConfig&, const Numbers&)> set;
};

// Binds a scalar member through an accessor returning a reference.
template <typename V>
Field scalar(std::string key, Codec codec, V& (*ref)(RunConfig&)) {
  return {std::move(key), std::move(codec),
          [ref](const RunConfig& c) { return Numbers{static_cast<double>(ref(const_cast<RunConfig&>(c)))}; },
          [ref](RunConfig& c, const Numbers& n) { ref(c) = static_cast<V>(n[0]); }};
}

Field seed_field(std::string key, std::uint64_t& (*ref)(RunConfig&)) {
  return {std::move(key), seed,
          [ref](const RunConfig& c) {
            const std::uint64_t v = ref(const_cast<RunConfig&>(c));
            return Numbers{double(v & 0xffffffffULL), double(v >> 32)};
          },
          [ref](RunConfig& c, const Numbers& n) {
            ref(c) = static_cast<std::uint64_t>(n[0]) | (static_cast<std::uint64_t>(n[1]) << 32);
          }};
}

Field widths_field(std::string key, std::array<Index, 4>& (*ref)(RunConfig&)) {
  return {std::move(key), widths,
          [ref](const RunConfig& c) {
            const auto& a = ref(const_cast<RunConfig&>(c));
            return Numbers{double(a[0]), double(a[1]), double(a[2]), double(a[3])};
          },
          [ref](RunConfig& c, const Numbers& n) {
            for (int i = 0; i < 4; ++i) ref(c)[i] = static_cast<Index>(n[i]);
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(scalar<Index>("model.in_channels", integer, [](RunConfig& c) -> Index& { return c.model.in_channels; }));
    f.push_back({"model.input_size", size,
                 [](const RunConfig& c) { return Numbers{double(c.model.height), double(c.model.width)}; },
                 [](RunConfig& c, const Numbers& n) {
                   c.model.height = static_cast<Index>(n[0]);
                   c.model.width = static_cast<Index>(n[1]);
                 }});
    f.push_back(widths_field("model.encoder_widths", [](RunConfig& c) -> std::array<Index, 4>& { return c.model.encoder_widths; }));
    f.push_back(widths_field("model.decoder_widths", [](RunConfig& c) -> std::array<Index, 4>& { return c.model.decoder_widths; }));
    f.push_back(scalar<Index>("model.heads", integer, [](RunConfig& c) -> Index& { return c.model.heads; }));
    f.push_back(scalar<Index>("model.fmcab_reduction", integer, [](RunConfig& c) -> Index& { return c.model.fmcab_reduction; }));
    f.push_back(scalar<double>("model.p_exponent", real, [](RunConfig& c) -> double& { return c.model.p_exponent; }));
    f.push_back(scalar<bool>("model.fm_relu", boolean, [](RunConfig& c) -> bool& { return c.model.fm_relu; }));
    f.push_back(scalar<Index>("model.shuffle_groups", integer, [](RunConfig& c) -> Index& { return c.model.shuffle_groups; }));
    f.push_back(scalar<double>("model.frm_dropout", real, [](RunConfig& c) -> double& { return c.model.frm_dropout; }));
    f.push_back(scalar<double>("model.bn_momentum", real, [](RunConfig& c) -> double& { return c.model.bn_momentum; }));
    f.push_back(scalar<SkipMode>("model.skip_mode", enumeration({"literal_s4", "stage_matched"}),
                                 [](RunConfig& c) -> SkipMode& { return c.model.skip_mode; }));
    f.push_back(seed_field("model.seed", [](RunConfig& c) -> std::uint64_t& { return c.model.seed; }));

    f.push_back(scalar<double>("train.lr0", real, [](RunConfig& c) -> double& { return c.train.lr0; }));
    f.push_back(scalar<int>("train.max_epochs", integer, [](RunConfig& c) -> int& { return c.train.max_epochs; }));
    f.push_back(scalar<int>("train.plateau_patience", integer, [](RunConfig& c) -> int& { return c.train.plateau_patience; }));
    f.push_back(scalar<double>("train.plateau_factor", real, [](RunConfig& c) -> double& { return c.train.plateau_factor; }));
    f.push_back(scalar<int>("train.early_stop_patience", integer, [](RunConfig& c) -> int& { return c.train.early_stop_patience; }));
    f.push_back(scalar<int>("train.batch_size", integer, [](RunConfig& c) -> int& { return c.train.batch_size; }));
    f.push_back(scalar<double>("train.w_bce", real, [](RunConfig& c) -> double& { return c.train.w_bce; }));
    f.push_back(scalar<double>("train.w_dice", real, [](RunConfig& c) -> double& { return c.train.w_dice; }));
    f.push_back(scalar<double>("train.beta1", real, [](RunConfig& c) -> double& { return c.train.beta1; }));
    f.push_back(scalar<double>("train.beta2", real, [](RunConfig& c) -> double& { return c.train.beta2; }));
    f.push_back(scalar<double>("train.adam_eps", real, [](RunConfig& c) -> double& { return c.train.adam_eps; }));
    f.push_back(scalar<AugmentMode>("train.augment", enumeration({"none", "random", "full"}),
                                    [](RunConfig& c) -> AugmentMode& { return c.train.augment; }));
    f.push_back(scalar<std::int64_t>("train.max_steps", integer, [](RunConfig& c) -> std::int64_t& { return c.train.max_steps; }));
    f.push_back(seed_field("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; }));

    f.push_back(scalar<double>("data.split_ratio", real, [](RunConfig& c) -> double& { return c.data.split_ratio; }));
    f.push_back(seed_field("data.split_seed", [](RunConfig& c) -> std::uint64_t& { return c.data.split_seed; }));
    return f;
  }();
  return table;
}

const Field& field(const std::string& key) {
  for (const Field& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Field& f = field(key);
  try {
    f.set(cfg, f.codec.parse(trim(value)));
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::set<std::string> seen;
  std::size_t line_no = 0, at = 0;
  while (at <= text.size()) {
    const std::size_t next = text.find('\n', at);
    std::string_view line = text.substr(at, next == std::string_view::npos ? std::string_view::npos : next - at);
    at = next == std::string_view::npos ? text.size() + 1 : next + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      set_config_value(base, key, body.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return base;
}

std::string format_config(const RunConfig& cfg) {
  std::string s;
  for (const Field& f : fields()) s += f.key + " = " + f.codec.format(f.get(cfg)) + "\n";
  return s;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.key);
  return keys;
}

std::vector<double> config_numbers(const RunConfig& cfg, const std::string& key) { return field(key).get(cfg); }

void set_config_numbers(RunConfig& cfg, const std::string& key, const std::vector<double>& values) {
  const Field& f = field(key);
  if (values.size() != f.codec.arity) {
    throw ConfigError(key + ": expected " + std::to_string(f.codec.arity) + " values, got " +
                      std::to_string(values.size()));
  }
  // Round-trip through the text codec so enum and range checks apply.
  f.set(cfg, f.codec.parse(f.codec.format(values)));
}

}  // namespace fmbff
