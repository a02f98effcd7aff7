#pragma once

// Symbolic validity checks shared by the data tests and the acceptance
// suite: the negative scene must differ from the positive by exactly one
// wrongly solved subproblem, and the premise must hold a unique target.

#include "lilac/data.hpp"

namespace symcheck {

inline bool corruption_valid_2d(const lilac::data::Instruction2D& in,
                                const lilac::data::Symbolic2D& sym) {
    using namespace lilac::data;
    int targets = 0;
    for (const Cell& c : sym.premise.cells)
        if (c.color == in.color && c.object == in.object) ++targets;
    if (targets != 1) return false;
    if (sym.positive.cells == sym.negative.cells) return false;

    // Recover the (src, dst) move between premise and negative.
    int src = -1, dst = -1;
    for (int p = 0; p < kGrid * kGrid; ++p) {
        const Cell& a = sym.premise.cells[static_cast<std::size_t>(p)];
        const Cell& b = sym.negative.cells[static_cast<std::size_t>(p)];
        if (a.color == b.color && a.object == b.object) continue;
        if (b.color < 0) src = p;
        else dst = p;
    }
    if (src < 0 || dst < 0) return false;
    const Cell& moved = sym.premise.cells[static_cast<std::size_t>(src)];
    int dr = dst / kGrid - src / kGrid, dc = dst % kGrid - src % kGrid;
    static const int kDr[4] = {1, 0, 0, -1}, kDc[4] = {0, -1, 1, 0};
    int dir = -1;
    for (int d = 0; d < 4; ++d)
        if (dr == kDr[d] && dc == kDc[d]) dir = d;
    if (dir < 0) return false;

    bool color_ok = moved.color == in.color;
    bool object_ok = moved.object == in.object;
    bool dir_ok = dir == in.direction;
    int wrong = (color_ok ? 0 : 1) + (object_ok ? 0 : 1) + (dir_ok ? 0 : 1);
    switch (sym.corruption) {
        case Corruption2D::kColor: return wrong == 1 && !color_ok;
        case Corruption2D::kObject: return wrong == 1 && !object_ok;
        case Corruption2D::kDirection: return wrong == 1 && !dir_ok;
    }
    return false;
}

inline bool corruption_valid_3d(const lilac::data::Instruction3D& in,
                                const lilac::data::Symbolic3D& sym) {
    using namespace lilac::data;
    int tb = 0, tw = 0;
    for (const Block& b : sym.premise.blocks)
        if (b.size == in.size && b.color == in.block_color) ++tb;
    for (const Bowl& w : sym.premise.bowls)
        if (w.color == in.bowl_color) ++tw;
    if (tb != 1 || tw != 1) return false;

    int moved = -1;
    for (std::size_t i = 0; i < sym.negative.blocks.size(); ++i)
        if (sym.negative.blocks[i].in_bowl >= 0) {
            if (moved >= 0) return false;
            moved = static_cast<int>(i);
        }
    if (moved < 0) return false;
    const Block& b = sym.negative.blocks[static_cast<std::size_t>(moved)];
    bool block_ok = b.size == in.size && b.color == in.block_color;
    bool bowl_ok = sym.negative.bowls[static_cast<std::size_t>(b.in_bowl)].color == in.bowl_color;
    if (sym.corruption == Corruption3D::kWrongBlock) return !block_ok && bowl_ok;
    return block_ok && !bowl_ok;
}

}  // namespace symcheck
