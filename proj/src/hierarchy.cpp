#include "codonball/hierarchy.hpp"

#include <algorithm>

#include "codonball/vocab.hpp"

namespace codonball::hierarchy {

const std::vector<std::pair<std::string, std::vector<std::string>>>& standard_genetic_code() {
    static const std::vector<std::pair<std::string, std::vector<std::string>>> table = {
        {"Phenylalanine", {"TTT", "TTC"}},
        {"Leucine", {"TTA", "TTG", "CTT", "CTC", "CTA", "CTG"}},
        {"Isoleucine", {"ATT", "ATC", "ATA"}},
        {"Methionine", {"ATG"}},
        {"Valine", {"GTT", "GTC", "GTA", "GTG"}},
        {"Serine", {"TCT", "TCC", "TCA", "TCG", "AGT", "AGC"}},
        {"Proline", {"CCT", "CCC", "CCA", "CCG"}},
        {"Threonine", {"ACT", "ACC", "ACA", "ACG"}},
        {"Alanine", {"GCT", "GCC", "GCA", "GCG"}},
        {"Tyrosine", {"TAT", "TAC"}},
        {"Histidine", {"CAT", "CAC"}},
        {"Glutamine", {"CAA", "CAG"}},
        {"Asparagine", {"AAT", "AAC"}},
        {"Lysine", {"AAA", "AAG"}},
        {"AsparticAcid", {"GAT", "GAC"}},
        {"GlutamicAcid", {"GAA", "GAG"}},
        {"Cysteine", {"TGT", "TGC"}},
        {"Tryptophan", {"TGG"}},
        {"Arginine", {"CGT", "CGC", "CGA", "CGG", "AGA", "AGG"}},
        {"Glycine", {"GGT", "GGC", "GGA", "GGG"}},
        {"Stop", {"TAA", "TAG", "TGA"}},
    };
    return table;
}

CodonTree CodonTree::standard() {
    std::vector<TreeNode> nodes;
    nodes.push_back({"root", -1, NodeKind::Root, -1});
    for (const auto& [family, codons] : standard_genetic_code()) {
        const int fam_idx = static_cast<int>(nodes.size());
        nodes.push_back({family, 0, NodeKind::Family, -1});
        for (const std::string& codon : codons)
            nodes.push_back({codon, fam_idx, NodeKind::Leaf, vocab::codon_id(codon)});
    }
    const int special_idx = static_cast<int>(nodes.size());
    nodes.push_back({"Special", 0, NodeKind::Family, -1});
    for (int k = 0; k < vocab::kSpecialCount; ++k) {
        const int token = vocab::kCodonCount + k;
        nodes.push_back({vocab::token_string(token), special_idx, NodeKind::Leaf, token});
    }
    return from_nodes(std::move(nodes));
}

CodonTree CodonTree::from_nodes(std::vector<TreeNode> nodes) {
    CodonTree tree;
    tree.nodes_ = std::move(nodes);
    const int n = tree.size();
    tree.children_.assign(static_cast<std::size_t>(n), {});
    tree.token_to_leaf_.assign(vocab::kSize, -1);
    for (int i = 0; i < n; ++i) {
        const TreeNode& node = tree.nodes_[static_cast<std::size_t>(i)];
        if (!tree.by_id_.emplace(node.id, i).second)
            throw ValidationError("tree: duplicate node id '" + node.id + "'");
        if (node.kind == NodeKind::Root) {
            if (tree.root_ >= 0) throw ValidationError("tree: more than one root");
            if (node.parent != -1) throw ValidationError("tree: root has a parent");
            tree.root_ = i;
        } else {
            if (node.parent < 0 || node.parent >= n)
                throw ValidationError("tree: node '" + node.id + "' has no valid parent");
            tree.children_[static_cast<std::size_t>(node.parent)].push_back(i);
        }
        if (node.kind == NodeKind::Leaf) {
            tree.leaves_.push_back(i);
            if (node.token < 0 || node.token >= vocab::kSize)
                throw ValidationError("tree: leaf '" + node.id + "' has no token");
            if (tree.token_to_leaf_[static_cast<std::size_t>(node.token)] != -1)
                throw ValidationError("tree: token of leaf '" + node.id + "' appears twice");
            tree.token_to_leaf_[static_cast<std::size_t>(node.token)] = i;
        } else if (node.kind == NodeKind::Family) {
            tree.families_.push_back(i);
        }
    }
    if (tree.root_ < 0) throw ValidationError("tree: no root");
    // reject cycles / forests: every node must reach the root
    for (int i = 0; i < n; ++i) {
        int cur = i, hops = 0;
        while (cur != tree.root_) {
            cur = tree.nodes_[static_cast<std::size_t>(cur)].parent;
            if (cur < 0 || ++hops > n)
                throw ValidationError("tree: node '" + tree.nodes_[static_cast<std::size_t>(i)].id +
                                      "' is not connected to the root");
        }
    }
    return tree;
}

int CodonTree::find(const std::string& id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? -1 : it->second;
}

bool CodonTree::has_token(int token) const {
    return token >= 0 && token < vocab::kSize && token_to_leaf_[static_cast<std::size_t>(token)] >= 0;
}

int CodonTree::leaf_of_token(int token) const {
    if (!has_token(token))
        throw ValidationError("tree: unknown token id " + std::to_string(token));
    return token_to_leaf_[static_cast<std::size_t>(token)];
}

int CodonTree::depth(int i) const {
    int d = 0;
    while (i != root_) {
        i = node(i).parent;
        ++d;
    }
    return d;
}

int CodonTree::tree_distance(int u, int v) const {
    if (u < 0 || u >= size() || v < 0 || v >= size())
        throw ValidationError("tree_distance: unknown node id");
    int du = depth(u), dv = depth(v), dist = 0;
    while (du > dv) { u = node(u).parent; --du; ++dist; }
    while (dv > du) { v = node(v).parent; --dv; ++dist; }
    while (u != v) {
        u = node(u).parent;
        v = node(v).parent;
        dist += 2;
    }
    return dist;
}

int CodonTree::family_index_of_token(int token) const {
    const int leaf = leaf_of_token(token);
    return node(leaf).parent;
}

const std::string& CodonTree::family_of_token(int token) const {
    return node(family_index_of_token(token)).id;
}

bool CodonTree::covers_vocabulary() const {
    return std::all_of(token_to_leaf_.begin(), token_to_leaf_.end(),
                       [](int leaf) { return leaf >= 0; });
}

} // namespace codonball::hierarchy
