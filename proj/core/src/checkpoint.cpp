#include "voxseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <type_traits>

#include "json.hpp"

namespace voxseg {

namespace {

constexpr char kMagic[5] = {'V', 'S', 'G', 'C', '1'};

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

template <typename T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
void put_tensor(std::string& out, const std::string& name, const Tensor<T>& t) {
  if (name.size() > 0xffff) throw std::invalid_argument("tensor name too long: " + name);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  out += static_cast<char>(dtype_code<T>());
  out += static_cast<char>(t.rank());
  for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  for (T v : t.data()) put<Bits>(out, std::bit_cast<Bits>(v));
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  template <typename T>
  std::pair<std::string, Tensor<T>> tensor() {
    std::string name = take(get<std::uint16_t>());
    const auto dtype = get<std::uint8_t>();
    const auto rank = get<std::uint8_t>();
    if (dtype > 1) fail("tensor " + name + " has unknown dtype code " + std::to_string(dtype));
    if (rank == 0) fail("tensor " + name + " has rank 0");
    Shape shape;
    for (int i = 0; i < rank; ++i) shape.push_back(get<std::uint32_t>());
    std::size_t n = 1;
    for (auto d : shape) {
      if (d == 0) fail("tensor " + name + " has a zero extent");
      n *= d;
    }
    need(n * (dtype == 0 ? 4 : 8));
    std::vector<T> values(n);
    for (auto& v : values) {
      if (dtype == 0) {
        v = static_cast<T>(std::bit_cast<float>(get<std::uint32_t>()));
      } else {
        v = static_cast<T>(std::bit_cast<double>(get<std::uint64_t>()));
      }
    }
    return {std::move(name), Tensor<T>(std::move(shape), std::move(values))};
  }

  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error(path_ + ": " + what);
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) fail("truncated checkpoint");
  }

  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model, const Adam<T>* optimizer,
                     const std::optional<std::string>& config_hash) {
  auto spec = nlohmann::json::parse(model.spec().to_json());
  if (config_hash) spec["config_hash"] = *config_hash;
  const std::string spec_text = spec.dump();

  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(spec_text.size()));
  out += spec_text;

  std::vector<std::pair<std::string, Tensor<T>>> state;
  model.visit_state([&](const std::string& name, Tensor<T>& t, bool) { state.emplace_back(name, t); });
  put<std::uint32_t>(out, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, t] : state) put_tensor(out, name, t);

  const auto opt_state = optimizer ? optimizer->state() : typename Adam<T>::NamedTensors{};
  put<std::uint32_t>(out, static_cast<std::uint32_t>(opt_state.size()));
  for (const auto& [name, t] : opt_state) put_tensor(out, name, t);
  put<std::uint64_t>(out, optimizer ? optimizer->step_count() : 0);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("failed writing " + path);
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  Reader in(std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()), path);

  std::string magic;
  try {
    magic = in.take(sizeof kMagic);
  } catch (const std::runtime_error&) {
    in.fail("not a checkpoint (expected magic \"VSGC1\")");
  }
  if (std::memcmp(magic.data(), kMagic, sizeof kMagic) != 0) {
    in.fail("not a checkpoint (expected magic \"VSGC1\")");
  }

  const std::string spec_text = in.take(in.get<std::uint32_t>());
  std::optional<std::string> hash;
  try {
    const auto j = nlohmann::json::parse(spec_text);
    if (j.contains("config_hash") && j["config_hash"].is_string()) {
      hash = j["config_hash"].get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    in.fail(std::string("corrupt architecture spec: ") + e.what());
  }
  LoadedCheckpoint<T> ck{Model<T>(ArchitectureSpec::from_json(spec_text), 0), {}, 0, hash};

  std::map<std::string, Tensor<T>> stored;
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = in.tensor<T>();
    if (!stored.emplace(name, t).second) in.fail("duplicate tensor " + name);
  }
  std::size_t matched = 0;
  ck.model.visit_state([&](const std::string& name, Tensor<T>& t, bool) {
    auto it = stored.find(name);
    if (it == stored.end()) in.fail("checkpoint lacks tensor " + name + " required by the architecture");
    if (it->second.shape() != t.shape()) {
      in.fail("tensor " + name + " has shape " + shape_str(it->second.shape()) +
              " but the architecture expects " + shape_str(t.shape()));
    }
    std::copy(it->second.data().begin(), it->second.data().end(), t.data().begin());
    ++matched;
  });
  if (matched != stored.size()) {
    in.fail(std::to_string(stored.size() - matched) + " stored tensors do not belong to the architecture");
  }

  const auto opt_count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < opt_count; ++i) ck.optimizer_state.push_back(in.tensor<T>());
  ck.step = in.get<std::uint64_t>();
  if (!in.done()) in.fail("trailing bytes after the step counter");
  return ck;
}

template void save_checkpoint<float>(const std::string&, Model<float>&, const Adam<float>*,
                                     const std::optional<std::string>&);
template void save_checkpoint<double>(const std::string&, Model<double>&, const Adam<double>*,
                                      const std::optional<std::string>&);
template LoadedCheckpoint<float> load_checkpoint<float>(const std::string&);
template LoadedCheckpoint<double> load_checkpoint<double>(const std::string&);

}  // namespace voxseg
