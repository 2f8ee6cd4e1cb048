#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "stseg/autodiff.hpp"

namespace stseg {

/// Named tensors of one model, in insertion order. Trainable entries are
/// optimizer targets; the rest are buffers (batch-norm running statistics,
/// input normalization) that are checkpointed but never receive gradients.
template <Real T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    bool trainable;
  };

  Var<T>& add(const std::string& name, Tensor<T> value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Var<T>(std::move(value), trainable), trainable});
    return entries_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Var<T>& get(const std::string& name) const { return entries_[lookup(name)].var; }
  Var<T>& get(const std::string& name) { return entries_[lookup(name)].var; }
  Tensor<T>& buffer(const std::string& name) { return entries_[lookup(name)].var.mutable_value(); }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  template <Real U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) out.add(e.name, e.var.value().template cast<U>(), e.trainable);
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.trainable != y.trainable || !(x.var.value() == y.var.value())) return false;
    }
    return true;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// He-normal kernel, std = sqrt(2 / fan_in).
template <Real T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

// ---------------------------------------------------------------------------
// STTC checkpoint container: "STTC", u32 count, then per entry u32 name
// length, UTF-8 name, STT1 blob.

template <Real T>
void write_sttc(std::ostream& os, const ParamStore<T>& store) {
  os.write("STTC", 4);
  detail::write_u32(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    detail::write_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_stt(os, e.var.value());
  }
  if (!os) throw IoError("failed writing STTC container");
}

template <Real T>
std::vector<std::pair<std::string, Tensor<T>>> read_sttc(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "STTC", 4) != 0) throw FormatError("bad STTC magic");
  const auto count = detail::read_u32(is);
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::read_u32(is);
    if (len > 4096) throw FormatError("implausible STTC name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated STTC name");
    out.emplace_back(std::move(name), read_stt<T>(is));
  }
  return out;
}

/// Writes to a sibling temp file and renames it into place.
template <typename Writer>
void write_atomically(const std::filesystem::path& path, Writer&& write) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    write(os);
    os.flush();
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

template <Real T>
void save_checkpoint(const std::filesystem::path& path, const ParamStore<T>& store) {
  write_atomically(path, [&](std::ostream& os) { write_sttc(os, store); });
}

/// Overwrites every entry of an already-initialized store from a checkpoint.
/// Names and shapes must match exactly.
template <Real T>
void load_checkpoint(const std::filesystem::path& path, ParamStore<T>& store) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  auto items = read_sttc<T>(is);
  if (items.size() != store.size())
    throw ConfigError("checkpoint " + path.string() + " has " + std::to_string(items.size()) +
                      " entries, model expects " + std::to_string(store.size()));
  for (auto& [name, tensor] : items) {
    if (!store.contains(name)) throw ConfigError("checkpoint entry " + name + " not in model");
    auto& dst = store.get(name).mutable_value();
    if (dst.shape() != tensor.shape())
      throw ConfigError("checkpoint entry " + name + " has shape " + to_string(tensor.shape()) + ", model expects " +
                        to_string(dst.shape()));
    dst = std::move(tensor);
  }
}

}  // namespace stseg
