#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"
#include "steervec/vectors.hpp"

namespace steervec {

using nlohmann::json;

namespace {

double cosine_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

struct Cluster {
  std::string label;  // smallest member code
  std::vector<std::string> members;
  std::size_t size = 0;
  bool active = true;
};

}  // namespace

Dendrogram agglomerative_average_linkage(std::span<const std::vector<float>> vectors,
                                         std::span<const std::string> labels) {
  const std::size_t n = vectors.size();
  if (n < 2) raise(Errc::invalid_argument, "clustering needs >= 2 vectors");
  if (labels.size() != n) raise(Errc::invalid_argument, "labels/vectors size mismatch");
  for (const auto& v : vectors) {
    double norm = 0.0;
    for (float x : v) norm += static_cast<double>(x) * x;
    if (norm == 0.0) raise(Errc::degenerate_vectors, "zero vector under cosine distance");
  }

  std::vector<std::vector<double>> dist(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) dist[i][j] = dist[j][i] = cosine_distance(vectors[i], vectors[j]);

  std::vector<Cluster> clusters(n);
  for (std::size_t i = 0; i < n; ++i) {
    clusters[i].label = labels[i];
    clusters[i].members = {labels[i]};
    clusters[i].size = 1;
  }

  Dendrogram out;
  out.leaves.assign(labels.begin(), labels.end());
  for (std::size_t merge = 0; merge + 1 < n; ++merge) {
    // pick the closest active pair; ties break on the lexicographically
    // smallest (label_a, label_b) pair
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = n, bj = n;
    std::string best_a, best_b;
    for (std::size_t i = 0; i < n; ++i) {
      if (!clusters[i].active) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!clusters[j].active) continue;
        std::string a = clusters[i].label, b = clusters[j].label;
        if (b < a) std::swap(a, b);
        const double d = dist[i][j];
        if (d < best || (d == best && std::tie(a, b) < std::tie(best_a, best_b))) {
          best = d;
          bi = i;
          bj = j;
          best_a = std::move(a);
          best_b = std::move(b);
        }
      }
    }

    DendrogramMerge m;
    m.a = best_a;
    m.b = best_b;
    m.distance = best;
    m.members = clusters[bi].members;
    m.members.insert(m.members.end(), clusters[bj].members.begin(), clusters[bj].members.end());
    std::sort(m.members.begin(), m.members.end());
    out.merges.push_back(std::move(m));

    // Lance-Williams update for average linkage
    const double si = static_cast<double>(clusters[bi].size);
    const double sj = static_cast<double>(clusters[bj].size);
    for (std::size_t k = 0; k < n; ++k) {
      if (!clusters[k].active || k == bi || k == bj) continue;
      dist[bi][k] = dist[k][bi] = (si * dist[bi][k] + sj * dist[bj][k]) / (si + sj);
    }
    clusters[bi].label = std::min(clusters[bi].label, clusters[bj].label);
    clusters[bi].members = out.merges.back().members;
    clusters[bi].size += clusters[bj].size;
    clusters[bj].active = false;
  }
  return out;
}

Dendrogram cluster_languages(const LanguageVectorBank& bank, int layer) {
  if (bank.languages.size() < 2) raise(Errc::insufficient_languages, ">= 2 languages required");
  if (layer < 1) layer = bank.n_layers;
  if (layer > bank.n_layers) raise(Errc::invalid_argument, "layer out of range");
  std::vector<std::vector<float>> rs;
  std::vector<std::string> labels;
  for (const auto& lang : bank.languages) {
    rs.push_back(language_representation(bank, lang.code, layer));
    labels.push_back(lang.code);
  }
  return agglomerative_average_linkage(rs, labels);
}

std::string dendrogram_to_json(const Dendrogram& d) {
  json j;
  j["leaves"] = d.leaves;
  j["merges"] = json::array();
  for (const auto& m : d.merges) {
    j["merges"].push_back(
        {{"a", m.a}, {"b", m.b}, {"distance", m.distance}, {"members", m.members}});
  }
  return j.dump(2);
}

namespace {

struct Node {
  int merge_index = -1;  // -1 for leaves
  std::string leaf;
  double distance = 0.0;
  int left = -1, right = -1;  // node indices
};

void render(const std::vector<Node>& nodes, int idx, const std::string& prefix, bool last,
            std::ostringstream& os) {
  const auto& node = nodes[idx];
  os << prefix << (prefix.empty() ? "" : (last ? "`-- " : "|-- "));
  if (node.merge_index < 0) {
    os << node.leaf << "\n";
    return;
  }
  os << "(" << node.distance << ")\n";
  const std::string next = prefix + (prefix.empty() ? "" : (last ? "    " : "|   "));
  render(nodes, node.left, next.empty() ? "    " : next, false, os);
  render(nodes, node.right, next.empty() ? "    " : next, true, os);
}

}  // namespace

std::string dendrogram_text_art(const Dendrogram& d) {
  // rebuild the tree: each cluster is keyed by its representative label
  std::vector<Node> nodes;
  std::map<std::string, int> rep;  // label -> node index
  for (const auto& leaf : d.leaves) {
    Node node;
    node.leaf = leaf;
    rep[leaf] = static_cast<int>(nodes.size());
    nodes.push_back(std::move(node));
  }
  int root = d.leaves.empty() ? -1 : rep[d.leaves.front()];
  for (std::size_t i = 0; i < d.merges.size(); ++i) {
    const auto& m = d.merges[i];
    Node node;
    node.merge_index = static_cast<int>(i);
    node.distance = m.distance;
    node.left = rep.at(m.a);
    node.right = rep.at(m.b);
    rep[std::min(m.a, m.b)] = static_cast<int>(nodes.size());
    root = static_cast<int>(nodes.size());
    nodes.push_back(std::move(node));
  }
  std::ostringstream os;
  if (root >= 0) render(nodes, root, "", true, os);
  return os.str();
}

}  // namespace steervec
