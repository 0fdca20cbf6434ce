#pragma once

// The codon / amino-acid tree: one root, 21 coding families (20 amino acids
// plus stop) and one family for special tokens, with the 70 vocabulary
// tokens as leaves. Immutable after construction.

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "codonball/common.hpp"

namespace codonball::hierarchy {

enum class NodeKind { Root, Family, Leaf };

struct TreeNode {
    std::string id;
    int parent = -1;   // -1 for the root
    NodeKind kind = NodeKind::Leaf;
    int token = -1;    // vocabulary token id for leaves, -1 otherwise
};

// family name -> codons, in the order families enter the standard tree.
const std::vector<std::pair<std::string, std::vector<std::string>>>& standard_genetic_code();

class CodonTree {
  public:
    // Builds the standard tree from the genetic code plus the special family.
    static CodonTree standard();

    // Validates an arbitrary rooted tree (used by the JSON loader).
    static CodonTree from_nodes(std::vector<TreeNode> nodes);

    int size() const { return static_cast<int>(nodes_.size()); }
    const TreeNode& node(int i) const { return nodes_.at(static_cast<std::size_t>(i)); }
    int root() const { return root_; }
    const std::vector<int>& children(int i) const { return children_.at(static_cast<std::size_t>(i)); }
    const std::vector<int>& leaves() const { return leaves_; }
    const std::vector<int>& families() const { return families_; }

    int find(const std::string& id) const;          // -1 when absent
    int leaf_of_token(int token) const;             // node index, throws if unmapped
    bool has_token(int token) const;
    int depth(int i) const;

    // Graph geodesic length between two node indices.
    int tree_distance(int u, int v) const;

    // Parent family label of a token's leaf.
    const std::string& family_of_token(int token) const;
    int family_index_of_token(int token) const;

    // True when every vocabulary token appears on exactly one leaf.
    bool covers_vocabulary() const;

  private:
    std::vector<TreeNode> nodes_;
    std::vector<std::vector<int>> children_;
    std::vector<int> leaves_;
    std::vector<int> families_;
    std::unordered_map<std::string, int> by_id_;
    std::vector<int> token_to_leaf_;
    int root_ = -1;
};

} // namespace codonball::hierarchy
