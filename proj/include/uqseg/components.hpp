// Two-pass connected-component labeling with a union-find equivalence table.
#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "uqseg/core.hpp"

namespace uqseg {

enum class Connectivity { kFour = 4, kEight = 8 };

/// Disjoint sets with path halving and union by smaller root index, so the
/// representative of a set is always its first-seen provisional label.
class UnionFind {
 public:
  std::uint32_t make() {
    parent_.push_back(static_cast<std::uint32_t>(parent_.size()));
    return parent_.back();
  }
  std::uint32_t find(std::uint32_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (a < b) parent_[b] = a;
    else parent_[a] = b;
  }
  std::size_t size() const { return parent_.size(); }

 private:
  std::vector<std::uint32_t> parent_;
};

struct ComponentLabels {
  /// 0 = background; components are numbered 1..count in raster order of
  /// their first pixel.
  Raster<std::uint32_t> labels;
  std::uint32_t count = 0;
};

inline ComponentLabels label_components(const BinaryMask& mask,
                                        Connectivity conn = Connectivity::kEight) {
  const std::size_t h = mask.height(), w = mask.width();
  Raster<std::uint32_t> prov(h, w, 0);
  UnionFind uf;
  uf.make();  // slot 0 is background
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask(y, x)) continue;
      std::uint32_t label = 0;
      auto visit = [&](std::size_t ny, std::size_t nx) {
        const std::uint32_t l = prov(ny, nx);
        if (!l) return;
        if (!label) label = l;
        else uf.unite(label, l);
      };
      if (x > 0) visit(y, x - 1);
      if (y > 0) {
        visit(y - 1, x);
        if (conn == Connectivity::kEight) {
          if (x > 0) visit(y - 1, x - 1);
          if (x + 1 < w) visit(y - 1, x + 1);
        }
      }
      prov(y, x) = label ? label : uf.make();
    }
  }
  std::vector<std::uint32_t> remap(uf.size(), 0);
  ComponentLabels out{Raster<std::uint32_t>(h, w, 0), 0};
  for (std::size_t i = 0; i < prov.size(); ++i) {
    if (!prov[i]) continue;
    const std::uint32_t root = uf.find(prov[i]);
    if (!remap[root]) remap[root] = ++out.count;
    out.labels[i] = remap[root];
  }
  return out;
}

}  // namespace uqseg
