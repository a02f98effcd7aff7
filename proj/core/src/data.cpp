#include "lilac/data.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace lilac::data {

Dataset dataset_from_string(const std::string& s) {
    if (s == "2d") return Dataset::kLilac2D;
    if (s == "3d") return Dataset::kLilac3D;
    throw std::invalid_argument("unknown dataset: " + s);
}

std::string dataset_to_string(Dataset d) { return d == Dataset::kLilac2D ? "2d" : "3d"; }

std::vector<Instruction2D> enumerate_instructions_2d() {
    std::vector<Instruction2D> out;
    out.reserve(kNumInstructions);
    for (int c = 0; c < 6; ++c)
        for (int o = 0; o < 3; ++o)
            for (int d = 0; d < 4; ++d) out.push_back({c, o, d});
    return out;
}

std::vector<Instruction3D> enumerate_instructions_3d() {
    std::vector<Instruction3D> out;
    out.reserve(kNumInstructions);
    for (int s = 0; s < 2; ++s)
        for (int bc = 0; bc < 6; ++bc)
            for (int wc = 0; wc < 6; ++wc) out.push_back({s, bc, wc});
    return out;
}

int instruction_id(const Instruction2D& in) { return (in.color * 3 + in.object) * 4 + in.direction; }
int instruction_id(const Instruction3D& in) { return (in.size * 6 + in.block_color) * 6 + in.bowl_color; }

std::string phrase(const Instruction2D& in) {
    static const char* dir_phrase[4] = {"down", "to the left", "to the right", "up"};
    std::ostringstream os;
    os << "move the " << kColors[static_cast<std::size_t>(in.color)] << ' '
       << kObjects[static_cast<std::size_t>(in.object)] << ' '
       << dir_phrase[in.direction];
    return os.str();
}

std::string phrase(const Instruction3D& in) {
    std::ostringstream os;
    os << "put the " << kSizes[static_cast<std::size_t>(in.size)] << ' '
       << kColors[static_cast<std::size_t>(in.block_color)] << " block in the "
       << kBowlColors[static_cast<std::size_t>(in.bowl_color)] << " bowl";
    return os.str();
}

const std::vector<std::string>& vocabulary(Dataset d) {
    static const std::vector<std::string> v2d = [] {
        std::vector<std::string> v = {"move", "the"};
        for (const char* c : kColors) v.push_back(c);
        for (const char* o : kObjects) v.push_back(o);
        v.insert(v.end(), {"down", "up", "to", "left", "right"});
        return v;
    }();
    static const std::vector<std::string> v3d = [] {
        std::vector<std::string> v = {"put", "the", "big", "small"};
        for (const char* c : kColors) v.push_back(c);
        v.insert(v.end(), {"block", "in"});
        for (const char* c : kBowlColors) v.push_back(c);
        v.push_back("bowl");
        return v;
    }();
    return d == Dataset::kLilac2D ? v2d : v3d;
}

std::vector<int> tokenize(Dataset d, const std::string& sentence) {
    const std::vector<std::string>& vocab = vocabulary(d);
    std::vector<int> out;
    std::istringstream is(sentence);
    std::string w;
    while (is >> w) {
        auto it = std::find(vocab.begin(), vocab.end(), w);
        if (it == vocab.end()) throw std::invalid_argument("out-of-vocabulary word: " + w);
        out.push_back(static_cast<int>(it - vocab.begin()));
    }
    return out;
}

namespace {

struct Rgb {
    float r, g, b;
};

constexpr Rgb kObjectPalette[6] = {
    {0.10f, 0.30f, 1.00f},  // blue
    {0.10f, 0.80f, 0.20f},  // green
    {0.60f, 0.60f, 0.60f},  // grey
    {0.60f, 0.10f, 0.80f},  // purple
    {1.00f, 0.15f, 0.10f},  // red
    {1.00f, 0.90f, 0.10f},  // yellow
};

constexpr Rgb kBowlPalette[6] = {
    {0.55f, 0.27f, 0.07f},  // brown
    {0.00f, 0.90f, 0.90f},  // cyan
    {1.00f, 0.55f, 0.00f},  // orange
    {0.00f, 0.37f, 0.42f},  // petrol
    {1.00f, 0.50f, 0.70f},  // pink
    {1.00f, 1.00f, 1.00f},  // white
};

void put_px(Tensor& img, int r, int c, const Rgb& color) {
    int h = img.shape[1], w = img.shape[2];
    if (r < 0 || r >= h || c < 0 || c >= w) return;
    std::size_t hw = static_cast<std::size_t>(h) * w;
    std::size_t off = static_cast<std::size_t>(r) * w + c;
    img.data[off] = color.r;
    img.data[hw + off] = color.g;
    img.data[2 * hw + off] = color.b;
}

// 8x8 glyphs: ball = disc, box = filled square, key = ring head + stem + tooth.
void draw_glyph(Tensor& img, int tile_r, int tile_c, int object, const Rgb& color) {
    int base_r = tile_r * 8, base_c = tile_c * 8;
    for (int dr = 0; dr < 8; ++dr)
        for (int dc = 0; dc < 8; ++dc) {
            bool on = false;
            float yr = dr - 3.5f, xc = dc - 3.5f;
            if (object == 0) {
                on = yr * yr + xc * xc <= 12.25f;
            } else if (object == 1) {
                on = dr >= 1 && dr <= 6 && dc >= 1 && dc <= 6;
            } else {
                float hy = dr - 2.0f, hx = dc - 3.5f;
                float d2 = hy * hy + hx * hx;
                bool head = d2 <= 5.0f && d2 >= 1.0f;  // ring
                bool stem = dr >= 4 && dr <= 7 && (dc == 3 || dc == 4);
                bool tooth = dr == 6 && (dc == 5 || dc == 6);
                on = head || stem || tooth;
            }
            if (on) put_px(img, base_r + dr, base_c + dc, color);
        }
}

constexpr int kSlotGrid = 4;  // 4x4 slots of 16x16 px on the 64x64 table

void draw_bowl(Tensor& img, int slot, const Rgb& color) {
    int cr = (slot / kSlotGrid) * 16 + 8, cc = (slot % kSlotGrid) * 16 + 8;
    for (int dr = -6; dr <= 6; ++dr)
        for (int dc = -6; dc <= 6; ++dc) {
            int d2 = dr * dr + dc * dc;
            if (d2 >= 16 && d2 <= 36) put_px(img, cr + dr, cc + dc, color);
        }
}

void draw_block(Tensor& img, int slot, int size, const Rgb& color) {
    int cr = (slot / kSlotGrid) * 16 + 8, cc = (slot % kSlotGrid) * 16 + 8;
    int half = size == 0 ? 5 : 3;  // big = 10 px, small = 6 px
    for (int dr = -half; dr < half; ++dr)
        for (int dc = -half; dc < half; ++dc) put_px(img, cr + dr, cc + dc, color);
}

}  // namespace

Tensor render(const Scene2D& s) {
    Tensor img = Tensor::zeros({3, kRaster2D, kRaster2D});
    for (int r = 0; r < kGrid; ++r)
        for (int c = 0; c < kGrid; ++c) {
            const Cell& cell = s.at(r, c);
            if (cell.color >= 0) draw_glyph(img, r, c, cell.object, kObjectPalette[cell.color]);
        }
    return img;
}

Tensor render(const Scene3D& s) {
    Tensor img = Tensor::zeros({3, kRaster3D, kRaster3D});
    for (const Bowl& b : s.bowls) draw_bowl(img, b.slot, kBowlPalette[b.color]);
    for (const Block& b : s.blocks) {
        int slot = b.in_bowl >= 0 ? s.bowls[static_cast<std::size_t>(b.in_bowl)].slot : b.slot;
        draw_block(img, slot, b.size, kObjectPalette[b.color]);
    }
    return img;
}

namespace {

constexpr int kDr[4] = {1, 0, 0, -1};  // down, left, right, up
constexpr int kDc[4] = {0, -1, 1, 0};

bool movable(const Scene2D& s, int r, int c, int dir) {
    int nr = r + kDr[dir], nc = c + kDc[dir];
    if (nr < 0 || nr >= kGrid || nc < 0 || nc >= kGrid) return false;
    return s.at(nr, nc).color < 0;
}

Scene2D moved(const Scene2D& s, int r, int c, int dir) {
    Scene2D out = s;
    out.at(r + kDr[dir], c + kDc[dir]) = out.at(r, c);
    out.at(r, c) = Cell{};
    return out;
}

}  // namespace

Symbolic2D generate_symbolic(const Instruction2D& in, Rng& rng) {
    // The corrupted subproblem is drawn first and the scene resampled until it
    // is realizable, so corruption frequencies stay exactly uniform.
    auto corruption = static_cast<Corruption2D>(rng.randint(3));
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Scene2D scene;
        int n = 3 + rng.randint(7);  // total objects in [3,9]
        std::vector<int> pos = rng.permutation(kGrid * kGrid);
        // Target occupies pos[0]; distractors draw uniformly from the 17
        // non-target (color, object) pairs so the target stays unique.
        scene.cells[static_cast<std::size_t>(pos[0])] = Cell{in.color, in.object};
        for (int i = 1; i < n; ++i) {
            int pair = rng.randint(17);
            int skip = in.color * 3 + in.object;
            if (pair >= skip) ++pair;
            scene.cells[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])] =
                Cell{pair / 3, pair % 3};
        }
        int tr = pos[0] / kGrid, tc = pos[0] % kGrid;
        if (!movable(scene, tr, tc, in.direction)) continue;

        Symbolic2D out;
        out.corruption = corruption;
        out.premise = scene;
        out.positive = moved(scene, tr, tc, in.direction);

        if (corruption == Corruption2D::kDirection) {
            std::vector<int> wrong;
            for (int d = 0; d < 4; ++d)
                if (d != in.direction && movable(scene, tr, tc, d)) wrong.push_back(d);
            if (wrong.empty()) continue;
            int d = wrong[static_cast<std::size_t>(rng.randint(static_cast<int>(wrong.size())))];
            out.negative = moved(scene, tr, tc, d);
            return out;
        }

        // Color / object corruption: a distractor matching the other attribute
        // is moved instead of the target.
        std::vector<int> candidates;
        for (int p = 0; p < kGrid * kGrid; ++p) {
            const Cell& cell = scene.cells[static_cast<std::size_t>(p)];
            if (cell.color < 0 || p == pos[0]) continue;
            bool match = corruption == Corruption2D::kColor
                             ? (cell.object == in.object && cell.color != in.color)
                             : (cell.color == in.color && cell.object != in.object);
            if (match && movable(scene, p / kGrid, p % kGrid, in.direction)) candidates.push_back(p);
        }
        if (candidates.empty()) continue;
        int p = candidates[static_cast<std::size_t>(rng.randint(static_cast<int>(candidates.size())))];
        out.negative = moved(scene, p / kGrid, p % kGrid, in.direction);
        return out;
    }
    throw std::runtime_error("generate_symbolic(2d): no feasible scene after 1000 retries");
}

Symbolic3D generate_symbolic(const Instruction3D& in, Rng& rng) {
    auto corruption = static_cast<Corruption3D>(rng.randint(2));
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Scene3D scene;
        int nb = 5 + rng.randint(4);  // blocks in [5,8]
        int nw = 3 + rng.randint(2);  // bowls in [3,4]
        std::vector<int> slots = rng.permutation(kSlotGrid * kSlotGrid);
        int si = 0;
        for (int i = 0; i < nw; ++i) {
            int color = i == 0 ? in.bowl_color : [&] {
                int c = rng.randint(5);
                return c >= in.bowl_color ? c + 1 : c;
            }();
            scene.bowls.push_back(Bowl{color, slots[static_cast<std::size_t>(si++)]});
        }
        for (int i = 0; i < nb; ++i) {
            int size = in.size, color = in.block_color;
            if (i > 0) {
                int pair = rng.randint(11);
                int skip = in.size * 6 + in.block_color;
                if (pair >= skip) ++pair;
                size = pair / 6;
                color = pair % 6;
            }
            scene.blocks.push_back(Block{size, color, slots[static_cast<std::size_t>(si++)], -1});
        }

        Symbolic3D out;
        out.corruption = corruption;
        out.premise = scene;
        out.positive = scene;
        out.positive.blocks[0].in_bowl = 0;
        out.negative = scene;
        if (corruption == Corruption3D::kWrongBlock) {
            int b = 1 + rng.randint(nb - 1);
            out.negative.blocks[static_cast<std::size_t>(b)].in_bowl = 0;
        } else {
            int w = 1 + rng.randint(nw - 1);
            out.negative.blocks[0].in_bowl = w;
        }
        return out;
    }
    throw std::runtime_error("generate_symbolic(3d): no feasible scene after 1000 retries");
}

Example generate_example(Dataset d, int instruction, Rng& rng) {
    Example ex;
    ex.instruction_id = instruction;
    if (d == Dataset::kLilac2D) {
        Instruction2D in = enumerate_instructions_2d()[static_cast<std::size_t>(instruction)];
        Symbolic2D sym = generate_symbolic(in, rng);
        ex.tokens = tokenize(d, phrase(in));
        ex.premise = render(sym.premise);
        ex.positive = render(sym.positive);
        ex.negative = render(sym.negative);
    } else {
        Instruction3D in = enumerate_instructions_3d()[static_cast<std::size_t>(instruction)];
        Symbolic3D sym = generate_symbolic(in, rng);
        ex.tokens = tokenize(d, phrase(in));
        ex.premise = render(sym.premise);
        ex.positive = render(sym.positive);
        ex.negative = render(sym.negative);
    }
    return ex;
}

TaskStream build_stream(Dataset d, std::uint64_t seed, const StreamCounts& counts) {
    if (counts.train <= 0 || counts.val <= 0 || counts.test <= 0)
        throw std::invalid_argument("stream counts must be positive");

    TaskStream stream;
    stream.dataset = d;
    stream.seed = seed;
    Rng root(seed);

    // Fixed instruction->task partition, then a seed-dependent task order.
    std::vector<int> ids(kNumInstructions);
    for (int i = 0; i < kNumInstructions; ++i) ids[static_cast<std::size_t>(i)] = i;
    Rng part = root.fork("partition");
    part.shuffle(ids);
    stream.init_instructions.assign(ids.begin(), ids.begin() + 12);
    std::vector<std::vector<int>> groups(10);
    for (int t = 0; t < 10; ++t)
        groups[static_cast<std::size_t>(t)].assign(ids.begin() + 12 + t * 6, ids.begin() + 18 + t * 6);
    Rng order_rng = root.fork("task-order");
    std::vector<int> order = order_rng.permutation(10);

    Rng ex_root = root.fork("ex");
    auto gen_split = [&](int instr, const char* split, int count, int task_id,
                         std::vector<Example>& dst) {
        Rng instr_rng = ex_root.fork(static_cast<std::uint64_t>(instr)).fork(split);
        for (int i = 0; i < count; ++i) {
            Rng r = instr_rng.fork(static_cast<std::uint64_t>(i));
            Example ex = generate_example(d, instr, r);
            ex.task_id = task_id;
            dst.push_back(std::move(ex));
        }
    };

    for (int instr : stream.init_instructions) gen_split(instr, "init", counts.train, 0, stream.init_set);

    stream.tasks.resize(10);
    stream.task_instructions.resize(10);
    for (int t = 0; t < 10; ++t) {
        const std::vector<int>& instrs = groups[static_cast<std::size_t>(order[static_cast<std::size_t>(t)])];
        stream.task_instructions[static_cast<std::size_t>(t)] = instrs;
        TaskData& td = stream.tasks[static_cast<std::size_t>(t)];
        for (int instr : instrs) {
            stream.instruction_to_task[instr] = t + 1;
            gen_split(instr, "train", counts.train, t + 1, td.train);
            gen_split(instr, "val", counts.val, t + 1, td.val);
            gen_split(instr, "test", counts.test, t + 1, td.test);
        }
    }
    return stream;
}

}  // namespace lilac::data
