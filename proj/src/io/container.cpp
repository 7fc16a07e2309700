#include "kkl/io/container.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "kkl/error.hpp"

namespace kkl::io {

namespace {

constexpr std::size_t kMagicLen = 8;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

std::string at_offset(std::size_t off) { return " (byte offset " + std::to_string(off) + ")"; }

}  // namespace

const Tensor& Container::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("container has no tensor '" + name + "'");
}

std::string encode_container(const char* magic, Container& c) {
  Json table = Json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    table.push_back(Json{{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += 8 * t.size();
  }
  c.manifest["tensors"] = table;
  c.manifest["payload_bytes"] = offset;
  const std::string header = c.manifest.dump();
  std::string out(magic, kMagicLen);
  put_u64(out, header.size());
  out += header;
  out.reserve(out.size() + offset);
  for (const auto& [name, t] : c.tensors)
    for (double v : t.values()) put_f64(out, v);
  return out;
}

Container decode_container(const char* magic, const std::string& bytes) {
  if (bytes.size() < kMagicLen + 8) throw FormatError("file too short for a header" + at_offset(bytes.size()));
  if (bytes.compare(0, kMagicLen, magic, kMagicLen) != 0)
    throw FormatError("bad magic, expected " + std::string(magic, kMagicLen) + at_offset(0));
  const std::uint64_t hlen = get_u64(bytes, kMagicLen);
  const std::size_t payload_at = kMagicLen + 8 + hlen;
  if (hlen > bytes.size() || payload_at > bytes.size())
    throw FormatError("header length " + std::to_string(hlen) + " runs past end of file" + at_offset(kMagicLen));
  Container c;
  try {
    c.manifest = Json::parse(bytes.substr(kMagicLen + 8, hlen));
  } catch (const Json::parse_error& e) {
    // e.byte is 1-based
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what() +
                      at_offset(kMagicLen + 8 + (e.byte > 0 ? e.byte - 1 : 0)));
  }
  if (!c.manifest.contains("tensors") || !c.manifest["tensors"].is_array())
    throw FormatError("manifest lacks a tensor table" + at_offset(kMagicLen + 8));
  const std::size_t payload = bytes.size() - payload_at;
  std::uint64_t expect = 0;
  for (const auto& e : c.manifest["tensors"]) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto off = e.at("offset").get<std::uint64_t>();
    if (off != expect)
      throw FormatError("tensor '" + name + "' offset " + std::to_string(off) + " != expected " + std::to_string(expect) +
                        at_offset(payload_at + expect));
    const std::uint64_t n = shape_size(shape);
    if (off + 8 * n > payload)
      throw FormatError("tensor '" + name + "' extends past end of payload" + at_offset(payload_at + off));
    Tensor t(shape);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::bit_cast<double>(get_u64(bytes, payload_at + off + 8 * i));
    c.tensors.emplace_back(name, std::move(t));
    expect = off + 8 * n;
  }
  if (expect != payload)
    throw FormatError("payload has " + std::to_string(payload) + " bytes, table describes " + std::to_string(expect) +
                      at_offset(payload_at + expect));
  if (c.manifest.value("payload_bytes", expect) != expect)
    throw FormatError("payload_bytes disagrees with the tensor table" + at_offset(kMagicLen + 8));
  return c;
}

void write_file(const std::string& path, const std::string& bytes) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write to '" + path + "' failed");
}

std::string read_file(const std::string& path) {
  if (!std::filesystem::exists(path)) throw MissingPrerequisite("missing file '" + path + "'");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void save_container(const std::string& path, const char* magic, Container& c) {
  write_file(path, encode_container(magic, c));
}

Container load_container(const std::string& path, const char* magic) {
  try {
    return decode_container(magic, read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

Json net_to_json(const NetConfig& n) {
  return Json{{"n_x", n.n_x},       {"n_u", n.n_u},           {"n_z", n.n_z},
              {"hidden", n.hidden}, {"hidden_layers", n.hidden_layers}, {"gru_hidden", n.gru_hidden},
              {"omega", n.omega},   {"ell_dim", n.ell_dim},   {"phi_hidden", n.phi_hidden},
              {"backbone", n.backbone}, {"embed", n.embed},   {"rank", n.rank},
              {"s_init", n.s_init}};
}

NetConfig net_from_json(const Json& j) {
  NetConfig n;
  n.n_x = j.at("n_x").get<std::size_t>();
  n.n_u = j.at("n_u").get<std::size_t>();
  n.n_z = j.at("n_z").get<std::size_t>();
  n.hidden = j.at("hidden").get<std::size_t>();
  n.hidden_layers = j.at("hidden_layers").get<std::size_t>();
  n.gru_hidden = j.at("gru_hidden").get<std::size_t>();
  n.omega = j.at("omega").get<std::size_t>();
  n.ell_dim = j.at("ell_dim").get<std::size_t>();
  n.phi_hidden = j.at("phi_hidden").get<std::size_t>();
  n.backbone = j.at("backbone").get<std::size_t>();
  n.embed = j.at("embed").get<std::size_t>();
  n.rank = j.at("rank").get<std::size_t>();
  n.s_init = j.at("s_init").get<double>();
  return n;
}

Container checkpoint_of(const ModelBundle& bundle, const Json& run_config, const Json& metrics) {
  bundle.validate();
  Container c;
  c.manifest["format_version"] = 1;
  c.manifest["system"] = bundle.system;
  c.manifest["variant"] = variant_name(bundle.variant);
  c.manifest["dt"] = bundle.dt;
  c.manifest["dimensions"] = Json{{"n_x", bundle.net.n_x}, {"n_u", bundle.net.n_u}, {"n_y", bundle.mats.n_y()},
                                  {"n_z", bundle.net.n_z}};
  c.manifest["net"] = net_to_json(bundle.net);
  c.manifest["config"] = run_config;
  c.manifest["metrics"] = metrics;
  for (const auto& [name, t] : bundle.params) c.tensors.emplace_back(name, t);
  c.tensors.emplace_back("mats.A", Tensor::from_matrix(bundle.mats.A));
  c.tensors.emplace_back("mats.B", Tensor::from_matrix(bundle.mats.B));
  return c;
}

ModelBundle bundle_of(const Container& ckpt) {
  const auto& m = ckpt.manifest;
  if (m.value("format_version", 0) != 1) throw FormatError("unsupported checkpoint format version");
  ModelBundle b;
  try {
    b.system = m.at("system").get<std::string>();
    b.variant = parse_variant(m.at("variant").get<std::string>());
    b.dt = m.at("dt").get<double>();
    b.net = net_from_json(m.at("net"));
  } catch (const Json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (name == "mats.A")
      b.mats.A = t.mat();
    else if (name == "mats.B")
      b.mats.B = t.mat();
    else
      b.params.emplace(name, t);
  }
  b.validate();
  return b;
}

namespace {

Tensor index_tensor(const std::vector<std::uint32_t>& v) {
  Tensor t(Shape{v.size(), 1});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<double>(v[i]);
  return t;
}

std::vector<std::uint32_t> index_vector(const Tensor& t) {
  std::vector<std::uint32_t> v(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) v[i] = static_cast<std::uint32_t>(t[i]);
  return v;
}

}  // namespace

Container dataset_container(const AutonomousDataset& d, const Json& run_config) {
  Container c;
  c.manifest["format_version"] = 1;
  c.manifest["kind"] = "autonomous";
  c.manifest["samples"] = d.size();
  c.manifest["burn_steps"] = d.burn_steps;
  c.manifest["config"] = run_config;
  c.tensors = {{"x", Tensor::from_matrix(d.x)},
               {"xdot", Tensor::from_matrix(d.xdot)},
               {"z", Tensor::from_matrix(d.z)},
               {"y", Tensor::from_matrix(d.y)}};
  return c;
}

Container dataset_container(const ForcedDataset& d, const Json& run_config) {
  Container c;
  c.manifest["format_version"] = 1;
  c.manifest["kind"] = "forced";
  c.manifest["samples"] = d.size();
  c.manifest["omega"] = d.omega;
  c.manifest["n_u"] = d.n_u;
  c.manifest["dt"] = d.dt;
  c.manifest["burn_steps"] = d.burn_steps;
  Json sigs = Json::array();
  for (const auto& s : d.signals)
    sigs.push_back(Json{{"kind", kind_name(s.kind)},
                        {"amplitude", s.amplitude},
                        {"frequency", s.frequency},
                        {"phase", s.phase},
                        {"offset", s.offset}});
  c.manifest["signals"] = sigs;
  c.manifest["signal_of"] = d.signal_of;
  c.manifest["config"] = run_config;
  c.tensors = {{"x", Tensor::from_matrix(d.x)}, {"xdot", Tensor::from_matrix(d.xdot)},
               {"y", Tensor::from_matrix(d.y)}, {"u", Tensor::from_matrix(d.u)},
               {"z", Tensor::from_matrix(d.z)}, {"traj_of", index_tensor(d.traj_of)},
               {"step_of", index_tensor(d.step_of)}};
  for (std::size_t i = 0; i < d.inputs.size(); ++i)
    c.tensors.emplace_back("inputs." + std::to_string(i), Tensor::from_matrix(d.inputs[i]));
  return c;
}

AutonomousDataset autonomous_of(const Container& c) {
  if (c.manifest.value("kind", "") != "autonomous") throw FormatError("not an autonomous dataset");
  AutonomousDataset d;
  d.x = c.tensor("x").mat();
  d.xdot = c.tensor("xdot").mat();
  d.z = c.tensor("z").mat();
  d.y = c.tensor("y").mat();
  d.burn_steps = c.manifest.at("burn_steps").get<std::size_t>();
  if (d.size() != c.manifest.at("samples").get<std::size_t>()) throw FormatError("sample count mismatch");
  return d;
}

ForcedDataset forced_of(const Container& c) {
  if (c.manifest.value("kind", "") != "forced") throw FormatError("not a forced dataset");
  const auto& m = c.manifest;
  ForcedDataset d;
  d.omega = m.at("omega").get<std::size_t>();
  d.n_u = m.at("n_u").get<std::size_t>();
  d.dt = m.at("dt").get<double>();
  d.burn_steps = m.at("burn_steps").get<std::size_t>();
  for (const auto& s : m.at("signals")) {
    InputSignal sig;
    sig.kind = parse_kind(s.at("kind").get<std::string>());
    sig.amplitude = s.at("amplitude").get<double>();
    sig.frequency = s.at("frequency").get<double>();
    sig.phase = s.at("phase").get<double>();
    sig.offset = s.at("offset").get<double>();
    d.signals.push_back(sig);
  }
  d.signal_of = m.at("signal_of").get<std::vector<std::size_t>>();
  d.x = c.tensor("x").mat();
  d.xdot = c.tensor("xdot").mat();
  d.y = c.tensor("y").mat();
  d.u = c.tensor("u").mat();
  d.z = c.tensor("z").mat();
  d.traj_of = index_vector(c.tensor("traj_of"));
  d.step_of = index_vector(c.tensor("step_of"));
  for (std::size_t i = 0; i < d.signal_of.size(); ++i) d.inputs.push_back(c.tensor("inputs." + std::to_string(i)).mat());
  if (d.size() != m.at("samples").get<std::size_t>()) throw FormatError("sample count mismatch");
  return d;
}

}  // namespace kkl::io
