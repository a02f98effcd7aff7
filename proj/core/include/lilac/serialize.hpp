#pragma once

#include <string>
#include <vector>

#include "lilac/data.hpp"
#include "lilac/graph.hpp"

namespace lilac::serialize {

// "LILC" stream container: magic, format version u16, stream header, then
// per-example records (token count u8, tokens u16[], three rasters as
// little-endian f32 arrays, task_id u16, instruction_id u16).
void export_stream(const data::TaskStream& stream, const std::string& path);
data::TaskStream import_stream(const std::string& path);

// Model checkpoint: named-parameter table (id string, shape, f32 payload).
void save_checkpoint(const std::vector<ParamPtr>& params, const std::string& path);
// Loads values into the given parameters by id; every parameter must be found.
void load_checkpoint(const std::vector<ParamPtr>& params, const std::string& path);

}  // namespace lilac::serialize
