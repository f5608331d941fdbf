#include <json.hpp>

#include "lowrank/netgraph.hpp"

namespace lowrank {

using nlohmann::json;

namespace {

json window_json(const PoolWindow& w) {
  return {{"k1", w.k1}, {"k2", w.k2}, {"s", w.s}, {"p", w.p}};
}

PoolWindow window_from(const json& j) {
  return PoolWindow{j.at("k1").get<std::size_t>(), j.at("k2").get<std::size_t>(),
                    j.at("s").get<std::size_t>(), j.at("p").get<std::size_t>()};
}

json params_json(const ConnectionKind& kind) {
  if (const auto* c = std::get_if<ConvKind>(&kind)) {
    return {{"k1", c->k1}, {"k2", c->k2}, {"s", c->s}, {"p", c->p}, {"c_in", c->c_in},
            {"c_out", c->c_out}};
  }
  if (const auto* f = std::get_if<FullyConnectedKind>(&kind)) {
    return {{"d_in", f->d_in}, {"d_out", f->d_out}};
  }
  if (const auto* a = std::get_if<AvgPoolKind>(&kind)) return window_json(*a);
  if (const auto* m = std::get_if<MaxPoolKind>(&kind)) return window_json(*m);
  if (const auto* r = std::get_if<RearrangeKind>(&kind)) {
    return {{"permutation", r->permutation}};
  }
  return json::object();
}

ConnectionKind kind_from(const std::string& name, const json& p) {
  if (name == "conv") {
    return ConvKind{p.at("k1").get<std::size_t>(), p.at("k2").get<std::size_t>(),
                    p.at("s").get<std::size_t>(),  p.at("p").get<std::size_t>(),
                    p.at("c_in").get<std::size_t>(), p.at("c_out").get<std::size_t>()};
  }
  if (name == "fc") {
    return FullyConnectedKind{p.at("d_in").get<std::size_t>(), p.at("d_out").get<std::size_t>()};
  }
  if (name == "avgpool") return AvgPoolKind{window_from(p)};
  if (name == "maxpool") return MaxPoolKind{window_from(p)};
  if (name == "rearrange") {
    RearrangeKind r;
    if (p.contains("permutation")) r.permutation = p.at("permutation").get<std::vector<std::size_t>>();
    return r;
  }
  if (name == "identity") return IdentityKind{};
  throw Error(ErrorCode::BadConfig, "unknown connection kind '" + name + "'");
}

}  // namespace

std::string graph_to_json(const NetworkGraph& g, std::optional<std::uint64_t> seed) {
  json j;
  j["version"] = kGraphSchemaVersion;
  j["layers"] = json::array();
  for (const auto& s : g.layers) j["layers"].push_back({{"c", s.c}, {"h", s.h}, {"w", s.w}});
  j["connections"] = json::array();
  for (const auto& c : g.connections) {
    j["connections"].push_back({{"src", c.src},
                                {"dst", c.dst},
                                {"kind", kind_name(c.kind)},
                                {"params", params_json(c.kind)},
                                {"trainable", c.trainable}});
  }
  j["k_out"] = g.k_out;
  if (seed) j["seed"] = *seed;
  return j.dump(2);
}

NetworkGraph graph_from_json(const std::string& text, std::optional<std::uint64_t>* seed) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("network JSON: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != kGraphSchemaVersion) {
      throw Error(ErrorCode::BadConfig, "unsupported network schema version");
    }
    NetworkGraph g;
    for (const auto& l : j.at("layers")) {
      g.layers.push_back({l.at("c").get<std::size_t>(), l.at("h").get<std::size_t>(),
                          l.at("w").get<std::size_t>()});
    }
    for (const auto& c : j.at("connections")) {
      const json params = c.contains("params") ? c.at("params") : json::object();
      ConnectionSpec spec{c.at("src").get<std::size_t>(), c.at("dst").get<std::size_t>(),
                          kind_from(c.at("kind").get<std::string>(), params), false};
      spec.trainable = c.contains("trainable") ? c.at("trainable").get<bool>()
                                               : is_trainable_kind(spec.kind);
      g.connections.push_back(std::move(spec));
    }
    g.k_out = j.at("k_out").get<std::size_t>();
    if (seed) {
      *seed = j.contains("seed") ? std::optional<std::uint64_t>(j.at("seed").get<std::uint64_t>())
                                 : std::nullopt;
    }
    return g;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadConfig, std::string("network JSON: ") + e.what());
  }
}

}  // namespace lowrank
