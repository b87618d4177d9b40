#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

namespace faultline::trust {

enum class NodeKind { kObject, kPart };
// Inference process that produced a node: direct detection, composition
// from children, or context from the parent.
enum class Process { kAlpha, kBeta, kGamma };
enum class Polarity { kPositive, kNegative };

inline constexpr Process kProcesses[] = {Process::kAlpha, Process::kBeta, Process::kGamma};

struct Node {
  std::string id;
  NodeKind kind = NodeKind::kObject;
  std::map<std::string, std::string> attributes;
  Process process = Process::kAlpha;
  std::optional<Polarity> polarity;
};

struct Edge {
  std::string from;
  std::string to;
  std::string relation;

  auto key() const { return std::tie(from, to, relation); }
  friend bool operator<(const Edge& a, const Edge& b) { return a.key() < b.key(); }
  friend bool operator==(const Edge& a, const Edge& b) { return a.key() == b.key(); }
};

class ParseGraph {
 public:
  // Throws on duplicate node ids.
  void add_node(Node node);
  // Throws when an endpoint is missing.
  void add_edge(Edge edge);

  const std::map<std::string, Node>& nodes() const noexcept { return nodes_; }
  const std::set<Edge>& edges() const noexcept { return edges_; }
  bool has_node(const std::string& id) const { return nodes_.count(id) != 0; }

  // ||pg|| = node count + edge count.
  std::size_t size() const noexcept { return nodes_.size() + edges_.size(); }

  // Elements whose (process, polarity) match; an edge inherits both from its
  // source node. Edges are kept even if their target is filtered out.
  ParseGraph select(std::optional<Process> process, std::optional<Polarity> polarity) const;

  friend bool operator==(const ParseGraph& a, const ParseGraph& b);

 private:
  friend ParseGraph graph_intersection(const ParseGraph&, const ParseGraph&);
  std::map<std::string, Node> nodes_;
  std::set<Edge> edges_;
};

// Nodes matching on (id, kind) and edges present in both (node data from g1).
ParseGraph graph_intersection(const ParseGraph& g1, const ParseGraph& g2);

// One game: the machine's mind as the user models it (polarity = believed
// correct/failed) and the machine's actual parse graph (polarity = actually
// correct/failed).
struct AnnotatedMind {
  std::size_t game_index = 0;
  ParseGraph pg_minu;
  ParseGraph pg_m;
};

// Throws if any node lacks a polarity mark.
void validate_annotated(const AnnotatedMind& game);

struct TrustOptions {
  // Divide each game's z-sum by the number of processes present in pg_M.
  bool normalize_by_populated_z = false;
};

double compute_jpt(const std::vector<AnnotatedMind>& games, const TrustOptions& options = {});
double compute_jnt(const std::vector<AnnotatedMind>& games, const TrustOptions& options = {});
double compute_reliance(const std::vector<AnnotatedMind>& games, const TrustOptions& options = {});

// Accuracy of the user's success/failure predictions:
// |C|/N * frac(C predicted success) + |W|/N * frac(W predicted failure).
double justified_trust_classification(const std::map<std::string, bool>& model_correct,
                                      const std::map<std::string, bool>& user_predicts_success);

struct GameTrust {
  double jpt = 0.0;
  double jnt = 0.0;
  double reliance = 0.0;
};

struct TrustReport {
  double jpt = 0.0;
  double jnt = 0.0;
  double reliance = 0.0;
  std::vector<GameTrust> per_game;
  std::optional<double> jt_classification;
};

TrustReport trust_report(const std::vector<AnnotatedMind>& games, const TrustOptions& options = {});

const char* to_string(Process p);
const char* to_string(NodeKind k);
Process process_from_string(const std::string& s);
NodeKind kind_from_string(const std::string& s);

// JSON: {nodes:[{id,kind,attrs,z,polarity}], edges:[{from,to,rel}]}.
std::string parse_graph_to_json(const ParseGraph& g);
ParseGraph parse_graph_from_json(const std::string& text);
std::string trust_report_to_json(const TrustReport& report, int indent = 2);
// {games:[{minu: <parse graph>, m: <parse graph>}]}
std::vector<AnnotatedMind> games_from_json(const std::string& text);

}  // namespace faultline::trust
