#include "wavenerf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "wavenerf/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace wavenerf {

namespace {

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool read_pod(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return is.gcount() == static_cast<std::streamsize>(sizeof(T));
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write("WVNF", 4);
    write_pod(os, kCheckpointVersion);
    for (const auto& [name, t] : params.entries()) {
        write_pod(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(os, static_cast<uint32_t>(t.ndim()));
        for (int d = 0; d < t.ndim(); ++d) write_pod(os, static_cast<uint64_t>(t.dim(d)));
        os.write(reinterpret_cast<const char*>(t.raw()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!os) throw IoError("write failure on checkpoint: " + path);
}

void load_checkpoint(const std::string& path, ParamStore& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "WVNF", 4) != 0) {
        throw IoError("not a WVNF checkpoint: " + path);
    }
    uint32_t version = 0;
    if (!read_pod(is, version)) throw IoError("truncated checkpoint header: " + path);
    if (version != kCheckpointVersion) {
        throw ContractError("checkpoint format version " + std::to_string(version) +
                            " is incompatible with supported version " +
                            std::to_string(kCheckpointVersion) + ": " + path);
    }
    size_t loaded = 0;
    while (true) {
        uint32_t name_len = 0;
        if (!read_pod(is, name_len)) break;  // clean EOF
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        uint32_t ndim = 0;
        if (is.gcount() != static_cast<std::streamsize>(name_len) || !read_pod(is, ndim)) {
            throw IoError("truncated checkpoint record: " + path);
        }
        Shape shape(ndim);
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            uint64_t e = 0;
            if (!read_pod(is, e)) throw IoError("truncated checkpoint record: " + path);
            shape[d] = static_cast<int>(e);
            numel *= static_cast<int64_t>(e);
        }
        Tensor t = params.find(name);
        if (t.shape() != shape) {
            throw ContractError("checkpoint shape " + shape_str(shape) + " for " + name +
                                " does not match parameter " + shape_str(t.shape()));
        }
        is.read(reinterpret_cast<char*>(t.raw()),
                static_cast<std::streamsize>(numel * sizeof(double)));
        if (is.gcount() != static_cast<std::streamsize>(numel * sizeof(double))) {
            throw IoError("truncated checkpoint payload: " + path);
        }
        ++loaded;
    }
    if (loaded != params.size()) {
        throw ContractError("checkpoint holds " + std::to_string(loaded) + " of " +
                            std::to_string(params.size()) + " parameters: " + path);
    }
}

}  // namespace wavenerf
