#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "face0/errors.hpp"
#include "face0/graph.hpp"
#include "face0/rng.hpp"
#include "face0/tensor.hpp"

namespace face0 {

// Named model parameters. Every tensor is initialized from a stream derived
// from (base seed, name), so values do not depend on registration order.
class ParamSet {
public:
    explicit ParamSet(std::uint64_t seed = 0) : seed_(seed) {}

    Tensor& add_zeros(const std::string& name, Dims dims) {
        return insert(name, Tensor::zeros(std::move(dims)));
    }

    // Uniform in [-b, b] with b = sqrt(6 / fan_in); callers pass the fan-in
    // because the layout convention differs between dense and conv weights.
    Tensor& add_uniform(const std::string& name, Dims dims, int fan_in) {
        if (fan_in <= 0) throw ContractError("add_uniform: fan_in must be positive");
        const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
        Rng rng(stream_seed(seed_, "init:" + name));
        Tensor t = Tensor::zeros(std::move(dims));
        for (auto& v : t.data) v = rng.uniform_f(-bound, bound);
        return insert(name, std::move(t));
    }

    Tensor& add_randn(const std::string& name, Dims dims, float stddev) {
        Rng rng(stream_seed(seed_, "init:" + name));
        return insert(name, Tensor::randn(std::move(dims), rng, stddev));
    }

    Tensor& add_tensor(const std::string& name, Tensor t) { return insert(name, std::move(t)); }

    Tensor& at(const std::string& name) {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw ContractError("no parameter named '" + name + "'");
        return it->second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw ContractError("no parameter named '" + name + "'");
        return it->second;
    }
    bool has(const std::string& name) const { return tensors_.count(name) != 0; }

    // Registers the tensor as a differentiable leaf in a graph.
    Graph::Id use(Graph& g, const std::string& name) const { return g.param(name, at(name)); }

    std::map<std::string, Tensor>& tensors() { return tensors_; }
    const std::map<std::string, Tensor>& tensors() const { return tensors_; }

    std::size_t total_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : tensors_) n += t.numel();
        return n;
    }

private:
    std::uint64_t seed_;
    std::map<std::string, Tensor> tensors_;

    Tensor& insert(const std::string& name, Tensor t) {
        auto [it, fresh] = tensors_.emplace(name, std::move(t));
        if (!fresh) throw ContractError("parameter '" + name + "' registered twice");
        return it->second;
    }
};

// ---- checkpoint serialization ----
//
// Layout (all integers little-endian u32, floats little-endian f32):
//   8-byte magic "FACE0CK\0", version, tensor count, then for each tensor in
//   name order: name length, name bytes, rank, extents, raw data.

inline constexpr char kCheckpointMagic[8] = {'F', 'A', 'C', 'E', '0', 'C', 'K', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    buf.push_back(static_cast<char>(v & 0xff));
    buf.push_back(static_cast<char>((v >> 8) & 0xff));
    buf.push_back(static_cast<char>((v >> 16) & 0xff));
    buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
    if (pos + 4 > buf.size()) throw IoError("checkpoint truncated");
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::map<std::string, Tensor>& tensors) {
    std::string buf;
    buf.append(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.append(name);
        detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.dims) detail::put_u32(buf, static_cast<std::uint32_t>(d));
        for (float v : t.data) detail::put_u32(buf, std::bit_cast<std::uint32_t>(v));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline std::map<std::string, Tensor> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    if (buf.size() < sizeof kCheckpointMagic ||
        buf.compare(0, sizeof kCheckpointMagic, kCheckpointMagic, sizeof kCheckpointMagic) != 0)
        throw IoError("'" + path.string() + "' is not a checkpoint (bad magic)");
    pos = sizeof kCheckpointMagic;
    const std::uint32_t version = detail::get_u32(buf, pos);
    if (version != kCheckpointVersion)
        throw IoError("checkpoint version " + std::to_string(version) + " unsupported");
    const std::uint32_t count = detail::get_u32(buf, pos);
    std::map<std::string, Tensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(buf, pos);
        if (pos + name_len > buf.size()) throw IoError("checkpoint truncated");
        std::string name = buf.substr(pos, name_len);
        pos += name_len;
        const std::uint32_t rank = detail::get_u32(buf, pos);
        if (rank > 8) throw IoError("checkpoint tensor rank " + std::to_string(rank) + " implausible");
        Dims dims;
        for (std::uint32_t r = 0; r < rank; ++r)
            dims.push_back(static_cast<int>(detail::get_u32(buf, pos)));
        Tensor t = Tensor::zeros(dims);
        for (auto& v : t.data) v = std::bit_cast<float>(detail::get_u32(buf, pos));
        if (!t.all_finite())
            throw NumericError("checkpoint tensor '" + name + "' holds non-finite values");
        if (!out.emplace(std::move(name), std::move(t)).second)
            throw IoError("checkpoint repeats a tensor name");
    }
    if (pos != buf.size()) throw IoError("checkpoint has trailing bytes");
    return out;
}

}  // namespace face0
