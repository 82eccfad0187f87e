#include "softrepa/checkpoint.hpp"

#include <cstring>

#include "softrepa/errors.hpp"
#include "softrepa/serde.hpp"

namespace softrepa {

namespace {

constexpr char kMagic[4] = {'S', 'R', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (float v : t.data()) w.f32(v);
}

void read_tensor_into(ByteReader& r, const std::string& expect_name, Tensor t) {
  const std::string name = r.str();
  check<format_error>(name == expect_name,
                      "checkpoint: expected tensor " + expect_name + ", found " + name);
  const std::uint32_t ndim = r.u32();
  check<format_error>(ndim == static_cast<std::uint32_t>(t.ndim()),
                      "checkpoint: rank mismatch for " + name);
  for (int d : t.shape())
    check<format_error>(r.u32() == static_cast<std::uint32_t>(d),
                        "checkpoint: shape mismatch for " + name);
  auto out = t.data();
  r.bytes(out.data(), out.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  check<contract_error>(ck.stage == "base" || ck.stage == "soft" || ck.stage == "lora",
                        "checkpoint: unknown stage " + ck.stage);
  check<contract_error>((ck.stage == "soft") == ck.soft.has_value(),
                        "checkpoint: soft section must match stage");
  check<contract_error>((ck.stage == "lora") == ck.lora.has_value(),
                        "checkpoint: lora section must match stage");
  ByteWriter w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kVersion);
  w.str(config_digest(ck.config));
  w.str(to_json(ck.config));
  w.u64(ck.seed);
  w.u64(ck.trained_steps);
  w.str(ck.stage);

  std::uint32_t sections = 1;
  if (ck.soft) ++sections;
  if (ck.lora) ++sections;
  w.u32(sections);

  w.str("base");
  w.u32(static_cast<std::uint32_t>(ck.model.params.size()));
  for (const auto& [name, t] : ck.model.params) write_tensor(w, name, t);

  if (ck.soft) {
    w.str("soft");
    w.u32(1);
    write_tensor(w, "table", ck.soft->table);
  }
  if (ck.lora) {
    w.str("lora");
    w.u32(static_cast<std::uint32_t>(ck.lora->a.size() + ck.lora->b.size()));
    for (std::size_t i = 0; i < ck.lora->a.size(); ++i) {
      write_tensor(w, "a" + std::to_string(i), ck.lora->a[i]);
      write_tensor(w, "b" + std::to_string(i), ck.lora->b[i]);
    }
  }

  w.u32(crc32(w.buffer().data(), w.buffer().size()));
  write_file(path, w.buffer());
}

Checkpoint load_checkpoint(const std::string& path) {
  ByteReader r(read_file(path));
  check<format_error>(r.size() >= sizeof kMagic + 8, "checkpoint: file too small");
  const std::uint32_t stored_crc =
      static_cast<std::uint32_t>(r.buffer()[r.size() - 4]) |
      static_cast<std::uint32_t>(r.buffer()[r.size() - 3]) << 8 |
      static_cast<std::uint32_t>(r.buffer()[r.size() - 2]) << 16 |
      static_cast<std::uint32_t>(r.buffer()[r.size() - 1]) << 24;
  check<format_error>(crc32(r.buffer().data(), r.size() - 4) == stored_crc,
                      "checkpoint: CRC mismatch");

  char magic[4];
  r.bytes(magic, sizeof magic);
  check<format_error>(std::memcmp(magic, kMagic, sizeof kMagic) == 0, "checkpoint: bad magic");
  check<format_error>(r.u32() == kVersion, "checkpoint: unsupported version");

  Checkpoint ck;
  const std::string digest = r.str();
  ck.config = config_from_json(r.str());
  check<format_error>(config_digest(ck.config) == digest, "checkpoint: config digest mismatch");
  ck.seed = r.u64();
  ck.trained_steps = r.u64();
  ck.stage = r.str();
  check<format_error>(ck.stage == "base" || ck.stage == "soft" || ck.stage == "lora",
                      "checkpoint: unknown stage " + ck.stage);

  const std::uint32_t sections = r.u32();
  check<format_error>(sections >= 1 && sections <= 2, "checkpoint: bad section count");

  check<format_error>(r.str() == "base", "checkpoint: first section must be base");
  ck.model = Denoiser(ck.config.model, 0);
  check<format_error>(r.u32() == ck.model.params.size(), "checkpoint: base tensor count mismatch");
  for (auto& [name, t] : ck.model.params) read_tensor_into(r, name, t);

  if (ck.stage == "soft") {
    check<format_error>(sections == 2 && r.str() == "soft", "checkpoint: missing soft section");
    check<format_error>(r.u32() == 1, "checkpoint: soft section must hold one tensor");
    ck.soft = SoftTokenBank(ck.config.soft.bank, ck.config.model.hidden, 0);
    read_tensor_into(r, "table", ck.soft->table);
  } else if (ck.stage == "lora") {
    check<format_error>(sections == 2 && r.str() == "lora", "checkpoint: missing lora section");
    ck.lora = LoraAdapters(ck.config.lora, ck.config.model.hidden, 0);
    check<format_error>(r.u32() == ck.lora->a.size() + ck.lora->b.size(),
                        "checkpoint: lora tensor count mismatch");
    for (std::size_t i = 0; i < ck.lora->a.size(); ++i) {
      read_tensor_into(r, "a" + std::to_string(i), ck.lora->a[i]);
      read_tensor_into(r, "b" + std::to_string(i), ck.lora->b[i]);
    }
  } else {
    check<format_error>(sections == 1, "checkpoint: unexpected extra section");
  }

  check<format_error>(r.pos() == r.size() - 4, "checkpoint: trailing bytes");
  return ck;
}

ForwardOptions options_for(const Checkpoint& ck, bool use_tuning) {
  ForwardOptions opt;
  if (!use_tuning) return opt;
  if (ck.soft) opt.soft = &*ck.soft;
  if (ck.lora) opt.lora = &*ck.lora;
  return opt;
}

}  // namespace softrepa
