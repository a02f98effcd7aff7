#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lilac/rng.hpp"
#include "lilac/tensor.hpp"

namespace lilac::data {

enum class Dataset { kLilac2D, kLilac3D };

Dataset dataset_from_string(const std::string& s);
std::string dataset_to_string(Dataset d);

// Canonical word lists (alphabetical).
inline constexpr std::array<const char*, 6> kColors = {"blue", "green", "grey",
                                                       "purple", "red", "yellow"};
inline constexpr std::array<const char*, 3> kObjects = {"ball", "box", "key"};
inline constexpr std::array<const char*, 4> kDirections = {"down", "left", "right", "up"};
inline constexpr std::array<const char*, 2> kSizes = {"big", "small"};
inline constexpr std::array<const char*, 6> kBowlColors = {"brown", "cyan", "orange",
                                                           "petrol", "pink", "white"};

constexpr int kNumInstructions = 72;
constexpr int kGrid = 7;
constexpr int kRaster2D = 56;  // 7 cells x 8 px tiles
constexpr int kRaster3D = 64;

struct Instruction2D {
    int color = 0;      // index into kColors
    int object = 0;     // index into kObjects
    int direction = 0;  // index into kDirections
};

struct Instruction3D {
    int size = 0;        // index into kSizes
    int block_color = 0; // index into kColors
    int bowl_color = 0;  // index into kBowlColors
};

// Canonical (color-major, then object, then direction) enumeration; id in [0,72).
std::vector<Instruction2D> enumerate_instructions_2d();
// Canonical (size-major, then block color, then bowl color) enumeration.
std::vector<Instruction3D> enumerate_instructions_3d();

int instruction_id(const Instruction2D& in);
int instruction_id(const Instruction3D& in);

std::string phrase(const Instruction2D& in);  // "move the red ball to the left"
std::string phrase(const Instruction3D& in);  // "put the big red block in the cyan bowl"

// Fixed template vocabulary per dataset; tokenization is whitespace split with
// every word required to be in-vocabulary.
const std::vector<std::string>& vocabulary(Dataset d);
std::vector<int> tokenize(Dataset d, const std::string& sentence);

struct Cell {
    int color = -1;   // -1 = empty
    int object = -1;
    auto operator<=>(const Cell&) const = default;
};

struct Scene2D {
    std::array<Cell, kGrid * kGrid> cells{};
    Cell& at(int r, int c) { return cells[static_cast<std::size_t>(r) * kGrid + c]; }
    const Cell& at(int r, int c) const { return cells[static_cast<std::size_t>(r) * kGrid + c]; }
};

struct Block {
    int size = 0;
    int color = 0;
    int slot = 0;        // index into the 4x4 placement grid
    int in_bowl = -1;    // bowl index if placed inside a bowl
};

struct Bowl {
    int color = 0;
    int slot = 0;
};

struct Scene3D {
    std::vector<Block> blocks;
    std::vector<Bowl> bowls;
};

Tensor render(const Scene2D& s);  // [3,56,56]
Tensor render(const Scene3D& s);  // [3,64,64]

struct Example {
    std::vector<int> tokens;
    Tensor premise;
    Tensor positive;
    Tensor negative;
    int task_id = 0;         // 0 = init split
    int instruction_id = 0;
};

enum class Corruption2D { kColor = 0, kObject = 1, kDirection = 2 };
enum class Corruption3D { kWrongBlock = 0, kWrongBowl = 1 };

// Symbolic (pre-render) form of a generated example, used by invariant checks.
struct Symbolic2D {
    Scene2D premise, positive, negative;
    Corruption2D corruption;
};
struct Symbolic3D {
    Scene3D premise, positive, negative;
    Corruption3D corruption;
};

Symbolic2D generate_symbolic(const Instruction2D& in, Rng& rng);
Symbolic3D generate_symbolic(const Instruction3D& in, Rng& rng);

Example generate_example(Dataset d, int instruction, Rng& rng);

struct StreamCounts {
    int train = 60;
    int val = 20;
    int test = 20;
};

struct TaskData {
    std::vector<Example> train, val, test;
};

struct TaskStream {
    Dataset dataset = Dataset::kLilac2D;
    std::uint64_t seed = 0;
    std::vector<Example> init_set;
    std::vector<TaskData> tasks;                  // ordered, size 10
    std::vector<std::vector<int>> task_instructions;  // per task, 6 instruction ids
    std::vector<int> init_instructions;               // 12 ids
    std::map<int, int> instruction_to_task;           // instrs in tasks only; 1-based task id
};

TaskStream build_stream(Dataset d, std::uint64_t seed, const StreamCounts& counts);

}  // namespace lilac::data
