#include "dial/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace dial {

namespace {

constexpr char kMagic[8] = {'D', 'I', 'A', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

void put_f32(std::ostream& os, float v) {
  std::uint32_t b;
  std::memcpy(&b, &v, 4);
  put_u32(os, b);
}

void put_f32s(std::ostream& os, const float* v, std::size_t n) {
  // Little-endian hosts write the buffer directly.
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_f32(os, v[i]);
  }
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  check_io(bool(is), "checkpoint truncated");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t lo = get_u32(is);
  std::uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

float get_f32(std::istream& is) {
  std::uint32_t b = get_u32(is);
  float v;
  std::memcpy(&v, &b, 4);
  return v;
}

void get_f32s(std::istream& is, float* v, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(v), static_cast<std::streamsize>(n * 4));
    check_io(bool(is), "checkpoint truncated");
  } else {
    for (std::size_t i = 0; i < n; ++i) v[i] = get_f32(is);
  }
}

void put_shape(std::ostream& os, const Shape& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  for (int d : s) put_u32(os, static_cast<std::uint32_t>(d));
}

Shape get_shape(std::istream& is) {
  const std::uint32_t rank = get_u32(is);
  check_io(rank <= 8, "checkpoint shape rank ", rank, " implausible");
  Shape s(rank);
  for (auto& d : s) d = static_cast<int>(get_u32(is));
  return s;
}

CheckpointMeta read_header(std::istream& is, const std::string& path) {
  char magic[8];
  is.read(magic, 8);
  check_io(bool(is) && std::memcmp(magic, kMagic, 8) == 0, "not a checkpoint file: ", path);
  const std::uint32_t version = get_u32(is);
  check_io(version == kVersion, "checkpoint version ", version, " unsupported (want ", kVersion,
           "): ", path);
  CheckpointMeta meta;
  meta.global_step = get_u64(is);
  meta.stage = static_cast<std::uint8_t>(is.get());
  const int has_norm = is.get();
  check_io(bool(is), "checkpoint truncated: ", path);
  if (has_norm) {
    const std::uint32_t a = get_u32(is);
    meta.norm_mean.resize(a);
    meta.norm_std.resize(a);
    get_f32s(is, meta.norm_mean.data(), a);
    get_f32s(is, meta.norm_std.data(), a);
  }
  return meta;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<ParamGroup>& groups,
                     const AdamState* adam, const CheckpointMeta& meta) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  check_io(os.is_open(), "cannot open checkpoint for writing: ", path);
  os.write(kMagic, 8);
  put_u32(os, kVersion);
  put_u64(os, meta.global_step);
  os.put(static_cast<char>(meta.stage));
  os.put(meta.norm_mean.empty() ? 0 : 1);
  if (!meta.norm_mean.empty()) {
    check(meta.norm_mean.size() == meta.norm_std.size(), "norm stat sizes disagree");
    put_u32(os, static_cast<std::uint32_t>(meta.norm_mean.size()));
    put_f32s(os, meta.norm_mean.data(), meta.norm_mean.size());
    put_f32s(os, meta.norm_std.data(), meta.norm_std.size());
  }
  put_u32(os, static_cast<std::uint32_t>(groups.size()));
  for (const auto& g : groups) {
    put_u32(os, static_cast<std::uint32_t>(g.name.size()));
    os.write(g.name.data(), static_cast<std::streamsize>(g.name.size()));
    put_u32(os, static_cast<std::uint32_t>(g.params.size()));
    for (const auto& p : g.params) {
      put_shape(os, p.shape());
      put_f32s(os, p.value().data(), p.numel());
    }
  }
  os.put(adam ? 1 : 0);
  if (adam) {
    put_u64(os, static_cast<std::uint64_t>(adam->step_count()));
    const auto& c = adam->config();
    put_f32(os, c.lr);
    put_f32(os, c.beta1);
    put_f32(os, c.beta2);
    put_f32(os, c.eps);
    put_f32(os, c.weight_decay);
    put_u32(os, static_cast<std::uint32_t>(groups.size()));
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const auto& g = groups[gi];
      put_u32(os, static_cast<std::uint32_t>(g.name.size()));
      os.write(g.name.data(), static_cast<std::streamsize>(g.name.size()));
      put_u32(os, static_cast<std::uint32_t>(g.params.size()));
      for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
        put_shape(os, g.params[pi].shape());
        const auto& slot = adam->slots()[gi][pi];
        put_f32s(os, slot.m.data(), slot.m.size());
        put_f32s(os, slot.v.data(), slot.v.size());
      }
    }
  }
  os.flush();
  check_io(bool(os), "write failed: ", path);
}

CheckpointMeta load_checkpoint(const std::string& path, std::vector<ParamGroup>& groups,
                               AdamState* adam) {
  std::ifstream is(path, std::ios::binary);
  check_io(is.is_open(), "cannot open checkpoint: ", path);
  CheckpointMeta meta = read_header(is, path);

  const std::uint32_t n_groups = get_u32(is);
  check(n_groups == groups.size(), "checkpoint has ", n_groups, " groups, model has ",
        groups.size(), ": ", path);
  for (auto& g : groups) {
    const std::uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    check(name == g.name, "checkpoint group '", name, "' does not match model group '", g.name, "'");
    const std::uint32_t n_params = get_u32(is);
    check(n_params == g.params.size(), "group '", g.name, "': checkpoint has ", n_params,
          " params, model has ", g.params.size());
    for (auto& p : g.params) {
      const Shape s = get_shape(is);
      check(s == p.shape(), "group '", g.name, "': shape mismatch, checkpoint ", shape_str(s),
            " vs model ", shape_str(p.shape()));
      get_f32s(is, p.mutable_value().data(), p.numel());
      p.zero_grad();
    }
  }

  const int has_adam = is.get();
  check_io(has_adam == 0 || has_adam == 1, "checkpoint truncated: ", path);
  if (has_adam && adam) {
    const auto steps = static_cast<std::int64_t>(get_u64(is));
    AdamConfig c;
    c.lr = get_f32(is);
    c.beta1 = get_f32(is);
    c.beta2 = get_f32(is);
    c.eps = get_f32(is);
    c.weight_decay = get_f32(is);
    *adam = AdamState(groups, c);
    adam->set_step_count(steps);
    const std::uint32_t n_groups2 = get_u32(is);
    check(n_groups2 == groups.size(), "adam section group count mismatch");
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
      const std::uint32_t name_len = get_u32(is);
      std::string name(name_len, '\0');
      is.read(name.data(), name_len);
      check(name == groups[gi].name, "adam section group '", name, "' mismatch");
      const std::uint32_t n_params = get_u32(is);
      check(n_params == groups[gi].params.size(), "adam section param count mismatch in '", name, "'");
      for (std::size_t pi = 0; pi < n_params; ++pi) {
        const Shape s = get_shape(is);
        check(s == groups[gi].params[pi].shape(), "adam slot shape mismatch in '", name, "'");
        auto& slot = adam->slots()[gi][pi];
        get_f32s(is, slot.m.data(), slot.m.size());
        get_f32s(is, slot.v.data(), slot.v.size());
      }
    }
  } else if (has_adam) {
    // Caller does not want optimizer state; skip is implicit since we stop reading.
  }
  return meta;
}

CheckpointMeta peek_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check_io(is.is_open(), "cannot open checkpoint: ", path);
  return read_header(is, path);
}

}  // namespace dial
