#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "lowrank/optimizer.hpp"

namespace lowrank {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'R', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + static_cast<std::size_t>(i)]))
         << (8 * i);
  }
  return v;
}

json config_json(const SgdConfig& c) {
  json sched = json::array();
  for (const auto& s : c.schedule) sched.push_back({s.epoch, s.multiplier});
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"schedule", sched},
          {"seed", c.seed},
          {"sampling", to_string(c.sampling)}};
}

SgdConfig config_from(const json& j) {
  SgdConfig c;
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  for (const auto& s : j.at("schedule")) c.schedule.push_back({s.at(0).get<std::size_t>(), s.at(1).get<double>()});
  c.seed = j.at("seed").get<std::uint64_t>();
  c.sampling = sampling_from_string(j.at("sampling").get<std::string>());
  return c;
}

}  // namespace

std::string checkpoint_bytes(const Checkpoint& ckpt) {
  check_parameters(ckpt.graph, ckpt.params);
  const auto edges = ckpt.graph.trainable_edges();
  json header;
  header["format"] = "lowrank-checkpoint";
  header["version"] = 1;
  header["graph"] = json::parse(graph_to_json(ckpt.graph));
  header["config"] = config_json(ckpt.config);
  header["step"] = ckpt.step;
  header["epoch"] = ckpt.epoch;
  header["blocks"] = json::array();
  std::uint64_t offset = 0;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto& spec = ckpt.graph.connections[edges[e]];
    const Matrix& w = ckpt.params[e];
    header["blocks"].push_back({{"edge", e},
                                {"src", spec.src},
                                {"dst", spec.dst},
                                {"rows", w.rows()},
                                {"cols", w.cols()},
                                {"offset", offset}});
    offset += 8 * w.size();
  }
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& w : ckpt.params.weights)
    for (double v : w.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::BadMagic, "not a checkpoint file");
  }
  const std::uint64_t hlen = get_u64(bytes, 8);
  if (bytes.size() < 16 + hlen) throw Error(ErrorCode::TruncatedFile, "checkpoint header truncated");
  Checkpoint ck;
  try {
    const json header = json::parse(bytes.substr(16, hlen));
    ck.graph = graph_from_json(header.at("graph").dump());
    ck.config = config_from(header.at("config"));
    ck.step = header.at("step").get<std::size_t>();
    ck.epoch = header.at("epoch").get<std::size_t>();
    const std::size_t base = 16 + hlen;
    for (const auto& b : header.at("blocks")) {
      const auto rows = b.at("rows").get<std::size_t>();
      const auto cols = b.at("cols").get<std::size_t>();
      const auto off = b.at("offset").get<std::size_t>();
      if (bytes.size() < base + off + 8 * rows * cols) {
        throw Error(ErrorCode::TruncatedFile, "checkpoint weight block truncated");
      }
      Matrix w(rows, cols);
      for (std::size_t i = 0; i < w.size(); ++i)
        w.data()[i] = std::bit_cast<double>(get_u64(bytes, base + off + 8 * i));
      ck.params.weights.push_back(std::move(w));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("checkpoint header: ") + e.what());
  }
  check_parameters(ck.graph, ck.params);
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot write " + path.string());
  const std::string bytes = checkpoint_bytes(ckpt);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return checkpoint_from_bytes(ss.str());
}

}  // namespace lowrank
