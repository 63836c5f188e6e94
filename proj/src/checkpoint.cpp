#include "fmbff/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <map>

#include "fmbff/image_io.hpp"

namespace fmbff {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in host byte order");

namespace {

constexpr char kMagic[4] = {'F', 'M', 'B', 'F'};
constexpr int kMaxRank = 8;

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

struct Reader {
  std::string_view bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (bytes.size() - pos < n) {
      throw ParseError(std::string("checkpoint: truncated while reading ") + what, bytes.size());
    }
  }
  template <typename V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, bytes.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
  }
};

std::uint32_t crc32_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

CheckpointEntry scalar_entry(const std::string& name, std::vector<double> values) {
  CheckpointEntry e;
  e.name = name;
  e.shape = {static_cast<Index>(values.size())};
  e.f64_type = true;
  e.f64 = std::move(values);
  return e;
}

CheckpointEntry f32_entry(const std::string& name, const Shape& shape, std::span<const float> values) {
  CheckpointEntry e;
  e.name = name;
  e.shape = shape;
  e.f32.assign(values.begin(), values.end());
  return e;
}

}  // namespace

std::string encode_entries(const std::vector<CheckpointEntry>& entries) {
  std::string out(kMagic, 4);
  put<std::uint16_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const CheckpointEntry& e : entries) {
    if (e.name.size() > 0xffff) throw UsageError("checkpoint: entry name too long");
    if (e.shape.size() > kMaxRank) throw UsageError("checkpoint: rank too large for '" + e.name + "'");
    const auto count = static_cast<std::size_t>(shape_numel(e.shape));
    if ((e.f64_type ? e.f64.size() : e.f32.size()) != count) {
      throw UsageError("checkpoint: payload size does not match shape for '" + e.name + "'");
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    put<std::uint8_t>(out, e.f64_type ? 1 : 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.shape.size()));
    for (Index d : e.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    if (e.f64_type) {
      out.append(reinterpret_cast<const char*>(e.f64.data()), count * sizeof(double));
    } else {
      out.append(reinterpret_cast<const char*>(e.f32.data()), count * sizeof(float));
    }
  }
  put<std::uint32_t>(out, crc32_of(out));
  return out;
}

std::vector<CheckpointEntry> decode_entries(std::string_view bytes) {
  Reader r{bytes};
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic (not an FMBF file)");
  r.pos = 4;
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.get<std::uint16_t>("name length");
    r.need(len, "name");
    e.name.assign(bytes.substr(r.pos, len));
    r.pos += len;
    const std::size_t dtype_at = r.pos;
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw ParseError("checkpoint: unknown dtype " + std::to_string(dtype), dtype_at);
    e.f64_type = dtype == 1;
    const std::size_t rank_at = r.pos;
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank > kMaxRank) throw ParseError("checkpoint: rank " + std::to_string(rank) + " too large", rank_at);
    std::size_t count_values = 1;
    for (int k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint32_t>("dims");
      e.shape.push_back(d);
      count_values *= d;
      if (count_values > bytes.size()) throw ParseError("checkpoint: extent exceeds file size", r.pos);
    }
    const std::size_t width = e.f64_type ? sizeof(double) : sizeof(float);
    r.need(count_values * width, "payload");
    if (e.f64_type) {
      e.f64.resize(count_values);
      std::memcpy(e.f64.data(), bytes.data() + r.pos, count_values * width);
    } else {
      e.f32.resize(count_values);
      std::memcpy(e.f32.data(), bytes.data() + r.pos, count_values * width);
    }
    r.pos += count_values * width;
    entries.push_back(std::move(e));
  }
  const std::size_t body = r.pos;
  const auto stored = r.get<std::uint32_t>("checksum");
  if (r.pos != bytes.size()) throw ParseError("checkpoint: trailing bytes after checksum", r.pos);
  if (crc32_of(bytes.substr(0, body)) != stored) throw FormatError("checkpoint: checksum mismatch (file corrupted)");
  return entries;
}

std::string encode_checkpoint(const Model<float>& model, const RunConfig& config, const TrainState& state) {
  std::vector<CheckpointEntry> out;
  const auto& entries = model.params().entries();
  for (const auto& e : entries) out.push_back(f32_entry(e.name, e.value.shape(), e.value.data()));
  if (state.adam.step > 0) {
    if (state.adam.m.size() != entries.size()) throw UsageError("checkpoint: optimizer state does not match model");
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!entries[i].trainable) continue;
      out.push_back(f32_entry("adam.m." + entries[i].name, entries[i].value.shape(), state.adam.m[i]));
      out.push_back(f32_entry("adam.v." + entries[i].name, entries[i].value.shape(), state.adam.v[i]));
    }
  }
  RunConfig cfg = config;
  cfg.model = model.config();
  for (const std::string& key : config_keys()) out.push_back(scalar_entry("config." + key, config_numbers(cfg, key)));
  const PlateauSchedule& s = state.schedule;
  out.push_back(scalar_entry("state.epoch", {double(state.epoch)}));
  out.push_back(scalar_entry("state.steps", {double(state.steps)}));
  out.push_back(scalar_entry("state.adam_step", {double(state.adam.step)}));
  out.push_back(scalar_entry("state.lr0", {s.lr0}));
  out.push_back(scalar_entry("state.lr", {s.lr}));
  out.push_back(scalar_entry("state.factor", {s.factor}));
  out.push_back(scalar_entry("state.plateau_patience", {double(s.plateau_patience)}));
  out.push_back(scalar_entry("state.stop_patience", {double(s.stop_patience)}));
  out.push_back(scalar_entry("state.best", {s.best}));
  out.push_back(scalar_entry("state.plateau_count", {double(s.plateau_count)}));
  out.push_back(scalar_entry("state.stale_count", {double(s.stale_count)}));
  out.push_back(scalar_entry("state.reductions", {double(s.reductions)}));
  return encode_entries(out);
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  std::map<std::string, CheckpointEntry> by_name;
  for (CheckpointEntry& e : decode_entries(bytes)) {
    const std::string name = e.name;
    if (!by_name.emplace(name, std::move(e)).second) throw FormatError("checkpoint: duplicate entry '" + name + "'");
  }
  auto take = [&](const std::string& name) -> CheckpointEntry {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing entry '" + name + "'");
    CheckpointEntry e = std::move(it->second);
    by_name.erase(it);
    return e;
  };
  auto scalar = [&](const std::string& name) {
    CheckpointEntry e = take(name);
    if (!e.f64_type || e.f64.size() != 1) throw FormatError("checkpoint: '" + name + "' is not an f64 scalar");
    return e.f64[0];
  };

  Checkpoint ck;
  for (const std::string& key : config_keys()) {
    CheckpointEntry e = take("config." + key);
    if (!e.f64_type) throw FormatError("checkpoint: 'config." + key + "' is not f64");
    try {
      set_config_numbers(ck.config, key, e.f64);
    } catch (const ConfigError& err) {
      throw FormatError(std::string("checkpoint: ") + err.what());
    }
  }
  ck.model = std::make_unique<Model<float>>(ck.config.model);

  TrainState& st = ck.state;
  st.epoch = static_cast<int>(scalar("state.epoch"));
  st.steps = static_cast<std::int64_t>(scalar("state.steps"));
  st.adam.step = static_cast<std::int64_t>(scalar("state.adam_step"));
  PlateauSchedule& s = st.schedule;
  s.lr0 = scalar("state.lr0");
  s.lr = scalar("state.lr");
  s.factor = scalar("state.factor");
  s.plateau_patience = static_cast<int>(scalar("state.plateau_patience"));
  s.stop_patience = static_cast<int>(scalar("state.stop_patience"));
  s.best = scalar("state.best");
  s.plateau_count = static_cast<int>(scalar("state.plateau_count"));
  s.stale_count = static_cast<int>(scalar("state.stale_count"));
  s.reductions = static_cast<int>(scalar("state.reductions"));

  auto fill = [&](const std::string& name, const Shape& shape, std::span<float> dst) {
    CheckpointEntry e = take(name);
    if (e.f64_type) throw FormatError("checkpoint: '" + name + "' should be f32");
    if (e.shape != shape) {
      throw FormatError("checkpoint: '" + name + "' has extents " + shape_str(e.shape) + ", model expects " +
                        shape_str(shape));
    }
    std::copy(e.f32.begin(), e.f32.end(), dst.begin());
  };
  const auto& entries = ck.model->params().entries();
  for (const auto& e : entries) {
    Tensor<float> t = e.value;
    fill(e.name, t.shape(), t.mutable_data());
  }
  if (st.adam.step > 0) {
    st.adam.m.assign(entries.size(), {});
    st.adam.v.assign(entries.size(), {});
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!entries[i].trainable) continue;
      const auto n = static_cast<std::size_t>(entries[i].value.numel());
      st.adam.m[i].resize(n);
      st.adam.v[i].resize(n);
      fill("adam.m." + entries[i].name, entries[i].value.shape(), st.adam.m[i]);
      fill("adam.v." + entries[i].name, entries[i].value.shape(), st.adam.v[i]);
    }
  }
  if (!by_name.empty()) throw FormatError("checkpoint: unexpected entry '" + by_name.begin()->first + "'");
  return ck;
}

void save_checkpoint(const std::string& path, const Model<float>& model, const RunConfig& config,
                     const TrainState& state) {
  write_file(path, encode_checkpoint(model, config, state));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace fmbff
