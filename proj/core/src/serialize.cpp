#include "lilac/serialize.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace lilac::serialize {

namespace {

constexpr std::uint16_t kStreamVersion = 1;
constexpr std::uint16_t kCheckpointVersion = 1;

void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

void read_bytes(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw std::runtime_error("truncated or corrupt file");
}

template <typename T>
T read_pod(std::istream& is) {
    T v;
    read_bytes(is, &v, sizeof(T));
    return v;
}

void write_example(std::ostream& os, const data::Example& ex) {
    if (ex.tokens.size() > 255) throw std::runtime_error("token sequence too long");
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(ex.tokens.size()));
    for (int t : ex.tokens) write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(t));
    for (const Tensor* img : {&ex.premise, &ex.positive, &ex.negative})
        write_bytes(os, img->data.data(), img->data.size() * sizeof(float));
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(ex.task_id));
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(ex.instruction_id));
}

data::Example read_example(std::istream& is, int h, int w) {
    data::Example ex;
    int n_tokens = read_pod<std::uint8_t>(is);
    ex.tokens.resize(static_cast<std::size_t>(n_tokens));
    for (int& t : ex.tokens) t = read_pod<std::uint16_t>(is);
    for (Tensor* img : {&ex.premise, &ex.positive, &ex.negative}) {
        *img = Tensor::zeros({3, h, w});
        read_bytes(is, img->data.data(), img->data.size() * sizeof(float));
    }
    ex.task_id = read_pod<std::uint16_t>(is);
    ex.instruction_id = read_pod<std::uint16_t>(is);
    return ex;
}

}  // namespace

void export_stream(const data::TaskStream& stream, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write("LILC", 4);
    write_pod<std::uint16_t>(os, kStreamVersion);
    write_pod<std::uint8_t>(os, stream.dataset == data::Dataset::kLilac2D ? 0 : 1);
    write_pod<std::uint64_t>(os, stream.seed);
    int h = stream.dataset == data::Dataset::kLilac2D ? data::kRaster2D : data::kRaster3D;
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(h));
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(h));
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(stream.tasks.size()));

    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(stream.init_instructions.size()));
    for (int id : stream.init_instructions) write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(id));
    for (const auto& instrs : stream.task_instructions) {
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(instrs.size()));
        for (int id : instrs) write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(id));
    }

    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(stream.init_set.size()));
    for (const data::TaskData& td : stream.tasks) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(td.train.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(td.val.size()));
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(td.test.size()));
    }

    for (const data::Example& ex : stream.init_set) write_example(os, ex);
    for (const data::TaskData& td : stream.tasks) {
        for (const data::Example& ex : td.train) write_example(os, ex);
        for (const data::Example& ex : td.val) write_example(os, ex);
        for (const data::Example& ex : td.test) write_example(os, ex);
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

data::TaskStream import_stream(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    read_bytes(is, magic, 4);
    if (std::memcmp(magic, "LILC", 4) != 0) throw std::runtime_error("bad magic: not a LILC file");
    std::uint16_t version = read_pod<std::uint16_t>(is);
    if (version != kStreamVersion) throw std::runtime_error("unsupported LILC version");

    data::TaskStream stream;
    std::uint8_t dset = read_pod<std::uint8_t>(is);
    if (dset > 1) throw std::runtime_error("bad dataset tag");
    stream.dataset = dset == 0 ? data::Dataset::kLilac2D : data::Dataset::kLilac3D;
    stream.seed = read_pod<std::uint64_t>(is);
    int h = read_pod<std::uint16_t>(is);
    int w = read_pod<std::uint16_t>(is);
    int expected = stream.dataset == data::Dataset::kLilac2D ? data::kRaster2D : data::kRaster3D;
    if (h != expected || w != expected)
        throw std::runtime_error("raster dimensions do not match dataset configuration");
    int n_tasks = read_pod<std::uint16_t>(is);

    int n_init_instr = read_pod<std::uint16_t>(is);
    stream.init_instructions.resize(static_cast<std::size_t>(n_init_instr));
    for (int& id : stream.init_instructions) id = read_pod<std::uint16_t>(is);
    stream.task_instructions.resize(static_cast<std::size_t>(n_tasks));
    for (int t = 0; t < n_tasks; ++t) {
        int n = read_pod<std::uint16_t>(is);
        auto& instrs = stream.task_instructions[static_cast<std::size_t>(t)];
        instrs.resize(static_cast<std::size_t>(n));
        for (int& id : instrs) {
            id = read_pod<std::uint16_t>(is);
            stream.instruction_to_task[id] = t + 1;
        }
    }

    std::uint32_t n_init = read_pod<std::uint32_t>(is);
    std::vector<std::array<std::uint32_t, 3>> counts(static_cast<std::size_t>(n_tasks));
    for (auto& c : counts)
        for (std::uint32_t& v : c) v = read_pod<std::uint32_t>(is);

    for (std::uint32_t i = 0; i < n_init; ++i) stream.init_set.push_back(read_example(is, h, w));
    stream.tasks.resize(static_cast<std::size_t>(n_tasks));
    for (int t = 0; t < n_tasks; ++t) {
        data::TaskData& td = stream.tasks[static_cast<std::size_t>(t)];
        const auto& c = counts[static_cast<std::size_t>(t)];
        for (std::uint32_t i = 0; i < c[0]; ++i) td.train.push_back(read_example(is, h, w));
        for (std::uint32_t i = 0; i < c[1]; ++i) td.val.push_back(read_example(is, h, w));
        for (std::uint32_t i = 0; i < c[2]; ++i) td.test.push_back(read_example(is, h, w));
    }
    return stream;
}

void save_checkpoint(const std::vector<ParamPtr>& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write("LMDL", 4);
    write_pod<std::uint16_t>(os, kCheckpointVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const ParamPtr& p : params) {
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(p->id.size()));
        write_bytes(os, p->id.data(), p->id.size());
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(p->value.shape.size()));
        for (int d : p->value.shape) write_pod<std::int32_t>(os, d);
        write_bytes(os, p->value.data.data(), p->value.data.size() * sizeof(float));
    }
    if (!os) throw std::runtime_error("write failed: " + path);
}

void load_checkpoint(const std::vector<ParamPtr>& params, const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    read_bytes(is, magic, 4);
    if (std::memcmp(magic, "LMDL", 4) != 0) throw std::runtime_error("bad magic: not a checkpoint");
    if (read_pod<std::uint16_t>(is) != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version");
    std::uint32_t n = read_pod<std::uint32_t>(is);

    std::unordered_map<std::string, Tensor> table;
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string id(read_pod<std::uint16_t>(is), '\0');
        read_bytes(is, id.data(), id.size());
        std::vector<int> shape(read_pod<std::uint8_t>(is));
        for (int& d : shape) d = read_pod<std::int32_t>(is);
        Tensor t = Tensor::zeros(shape);
        read_bytes(is, t.data.data(), t.data.size() * sizeof(float));
        table.emplace(std::move(id), std::move(t));
    }
    for (const ParamPtr& p : params) {
        auto it = table.find(p->id);
        if (it == table.end()) throw std::runtime_error("checkpoint missing parameter: " + p->id);
        if (it->second.shape != p->value.shape)
            throw std::runtime_error("checkpoint shape mismatch for: " + p->id);
        p->value = it->second;
    }
}

}  // namespace lilac::serialize
