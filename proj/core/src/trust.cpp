#include "faultline/trust.hpp"

#include <json.hpp>

#include "faultline/error.hpp"

namespace faultline::trust {

using nlohmann::json;

void ParseGraph::add_node(Node node) {
  const std::string id = node.id;
  if (!nodes_.emplace(id, std::move(node)).second) {
    throw Error(ErrorCode::kInvalidArgument, "duplicate node id '" + id + "'");
  }
}

void ParseGraph::add_edge(Edge edge) {
  if (!has_node(edge.from) || !has_node(edge.to)) {
    throw Error(ErrorCode::kInvalidArgument, "edge " + edge.from + "->" + edge.to + " references a missing node");
  }
  edges_.insert(std::move(edge));
}

ParseGraph ParseGraph::select(std::optional<Process> process, std::optional<Polarity> polarity) const {
  auto matches = [&](const Node& n) {
    return (!process || n.process == *process) && (!polarity || n.polarity == polarity);
  };
  ParseGraph out;
  for (const auto& [id, n] : nodes_) {
    if (matches(n)) out.nodes_.emplace(id, n);
  }
  for (const auto& e : edges_) {
    if (matches(nodes_.at(e.from))) out.edges_.insert(e);
  }
  return out;
}

bool operator==(const ParseGraph& a, const ParseGraph& b) {
  if (a.edges_ != b.edges_ || a.nodes_.size() != b.nodes_.size()) return false;
  for (const auto& [id, n] : a.nodes_) {
    auto it = b.nodes_.find(id);
    if (it == b.nodes_.end()) return false;
    const Node& m = it->second;
    if (n.kind != m.kind || n.attributes != m.attributes || n.process != m.process || n.polarity != m.polarity) {
      return false;
    }
  }
  return true;
}

ParseGraph graph_intersection(const ParseGraph& g1, const ParseGraph& g2) {
  ParseGraph out;
  for (const auto& [id, n] : g1.nodes_) {
    auto it = g2.nodes_.find(id);
    if (it != g2.nodes_.end() && it->second.kind == n.kind) out.nodes_.emplace(id, n);
  }
  for (const auto& e : g1.edges_) {
    if (g2.edges_.count(e) != 0) out.edges_.insert(e);
  }
  return out;
}

void validate_annotated(const AnnotatedMind& game) {
  for (const auto* g : {&game.pg_minu, &game.pg_m}) {
    for (const auto& [id, n] : g->nodes()) {
      if (!n.polarity) throw Error(ErrorCode::kInvalidArgument, "node '" + id + "' has no polarity mark");
    }
  }
}

namespace {

std::size_t processes_present(const ParseGraph& g) {
  std::set<Process> seen;
  for (const auto& [id, n] : g.nodes()) seen.insert(n.process);
  return seen.size();
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

// Sum over z of ||MinU_{z,pol} ∩ M_{pol}|| / ||M_{pol}||.
double justified_term(const AnnotatedMind& game, Polarity pol, const TrustOptions& options) {
  validate_annotated(game);
  const ParseGraph actual = game.pg_m.select(std::nullopt, pol);
  double sum = 0.0;
  for (Process z : kProcesses) {
    const ParseGraph believed = game.pg_minu.select(z, pol);
    sum += ratio(graph_intersection(believed, actual).size(), actual.size());
  }
  if (options.normalize_by_populated_z) sum /= static_cast<double>(std::max<std::size_t>(1, processes_present(game.pg_m)));
  return sum;
}

// Sum over z of ||MinU_z ∩ M_z|| / ||M||; polarity marks play no part.
double reliance_term(const AnnotatedMind& game, const TrustOptions& options) {
  validate_annotated(game);
  double sum = 0.0;
  for (Process z : kProcesses) {
    const auto shared = graph_intersection(game.pg_minu.select(z, std::nullopt), game.pg_m.select(z, std::nullopt));
    sum += ratio(shared.size(), game.pg_m.size());
  }
  if (options.normalize_by_populated_z) sum /= static_cast<double>(std::max<std::size_t>(1, processes_present(game.pg_m)));
  return sum;
}

template <class Term>
double average(const std::vector<AnnotatedMind>& games, Term term) {
  if (games.empty()) throw Error(ErrorCode::kEmptySet, "trust metrics need at least one game");
  double total = 0.0;
  for (const auto& g : games) total += term(g);
  return total / static_cast<double>(games.size());
}

}  // namespace

double compute_jpt(const std::vector<AnnotatedMind>& games, const TrustOptions& options) {
  return average(games, [&](const AnnotatedMind& g) { return justified_term(g, Polarity::kPositive, options); });
}

double compute_jnt(const std::vector<AnnotatedMind>& games, const TrustOptions& options) {
  return average(games, [&](const AnnotatedMind& g) { return justified_term(g, Polarity::kNegative, options); });
}

double compute_reliance(const std::vector<AnnotatedMind>& games, const TrustOptions& options) {
  return average(games, [&](const AnnotatedMind& g) { return reliance_term(g, options); });
}

double justified_trust_classification(const std::map<std::string, bool>& model_correct,
                                      const std::map<std::string, bool>& user_predicts_success) {
  if (model_correct.empty()) throw Error(ErrorCode::kEmptySet, "no images to score");
  if (model_correct.size() != user_predicts_success.size()) {
    throw Error(ErrorCode::kInvalidArgument, "model verdicts and user predictions cover different images");
  }
  std::size_t c_total = 0, c_hit = 0, w_total = 0, w_hit = 0;
  for (const auto& [id, correct] : model_correct) {
    auto it = user_predicts_success.find(id);
    if (it == user_predicts_success.end()) {
      throw Error(ErrorCode::kInvalidArgument, "no user prediction for '" + id + "'");
    }
    if (correct) {
      ++c_total;
      c_hit += it->second ? 1 : 0;
    } else {
      ++w_total;
      w_hit += it->second ? 0 : 1;
    }
  }
  const double n = static_cast<double>(c_total + w_total);
  const double wc = static_cast<double>(c_total) / n;
  const double ww = static_cast<double>(w_total) / n;
  return wc * ratio(c_hit, c_total) + ww * ratio(w_hit, w_total);
}

TrustReport trust_report(const std::vector<AnnotatedMind>& games, const TrustOptions& options) {
  TrustReport r;
  r.jpt = compute_jpt(games, options);
  r.jnt = compute_jnt(games, options);
  r.reliance = compute_reliance(games, options);
  for (const auto& g : games) {
    r.per_game.push_back({justified_term(g, Polarity::kPositive, options),
                          justified_term(g, Polarity::kNegative, options), reliance_term(g, options)});
  }
  return r;
}

const char* to_string(Process p) {
  switch (p) {
    case Process::kAlpha: return "alpha";
    case Process::kBeta: return "beta";
    case Process::kGamma: return "gamma";
  }
  return "alpha";
}

const char* to_string(NodeKind k) { return k == NodeKind::kObject ? "object" : "part"; }

Process process_from_string(const std::string& s) {
  if (s == "alpha") return Process::kAlpha;
  if (s == "beta") return Process::kBeta;
  if (s == "gamma") return Process::kGamma;
  throw Error(ErrorCode::kInvalidArgument, "unknown process tag '" + s + "'");
}

NodeKind kind_from_string(const std::string& s) {
  if (s == "object") return NodeKind::kObject;
  if (s == "part") return NodeKind::kPart;
  throw Error(ErrorCode::kInvalidArgument, "unknown node kind '" + s + "'");
}

namespace {

json graph_json(const ParseGraph& g) {
  json j;
  j["nodes"] = json::array();
  for (const auto& [id, n] : g.nodes()) {
    json node = {{"id", id}, {"kind", to_string(n.kind)}, {"attrs", n.attributes}, {"z", to_string(n.process)}};
    node["polarity"] = n.polarity ? json(*n.polarity == Polarity::kPositive ? "+" : "-") : json(nullptr);
    j["nodes"].push_back(node);
  }
  j["edges"] = json::array();
  for (const auto& e : g.edges()) j["edges"].push_back({{"from", e.from}, {"to", e.to}, {"rel", e.relation}});
  return j;
}

ParseGraph graph_from(const json& j) {
  ParseGraph g;
  for (const auto& n : j.at("nodes")) {
    Node node;
    node.id = n.at("id").get<std::string>();
    node.kind = kind_from_string(n.value("kind", std::string("object")));
    if (n.contains("attrs")) node.attributes = n.at("attrs").get<std::map<std::string, std::string>>();
    node.process = process_from_string(n.value("z", std::string("alpha")));
    if (n.contains("polarity") && !n.at("polarity").is_null()) {
      const auto p = n.at("polarity").get<std::string>();
      if (p != "+" && p != "-") throw Error(ErrorCode::kInvalidArgument, "polarity must be '+' or '-'");
      node.polarity = p == "+" ? Polarity::kPositive : Polarity::kNegative;
    }
    g.add_node(std::move(node));
  }
  if (j.contains("edges")) {
    for (const auto& e : j.at("edges")) {
      g.add_edge({e.at("from").get<std::string>(), e.at("to").get<std::string>(), e.value("rel", std::string())});
    }
  }
  return g;
}

}  // namespace

std::string parse_graph_to_json(const ParseGraph& g) { return graph_json(g).dump(); }

ParseGraph parse_graph_from_json(const std::string& text) {
  try {
    return graph_from(json::parse(text));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, std::string("bad parse graph JSON: ") + e.what());
  }
}

std::string trust_report_to_json(const TrustReport& report, int indent) {
  json j;
  j["jpt"] = report.jpt;
  j["jnt"] = report.jnt;
  j["reliance"] = report.reliance;
  j["per_game"] = json::array();
  for (const auto& g : report.per_game) j["per_game"].push_back({{"jpt", g.jpt}, {"jnt", g.jnt}, {"reliance", g.reliance}});
  j["jt_classification"] = report.jt_classification ? json(*report.jt_classification) : json(nullptr);
  return j.dump(indent);
}

std::vector<AnnotatedMind> games_from_json(const std::string& text) {
  std::vector<AnnotatedMind> games;
  try {
    const json j = json::parse(text);
    std::size_t i = 0;
    for (const auto& g : j.at("games")) {
      games.push_back({i++, graph_from(g.at("minu")), graph_from(g.at("m"))});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedHeader, std::string("bad games JSON: ") + e.what());
  }
  return games;
}

}  // namespace faultline::trust
