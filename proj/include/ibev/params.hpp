#pragma once

// Named parameter registry and the checkpoint format: a text manifest
// (key=value lines listing name/shape/dtype/offset per tensor plus free-form
// meta entries) next to a single little-endian binary blob. Round trips are
// bit-exact.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "ibev/tensor.hpp"

namespace ibev {

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    std::string init_spec;
};

template <class T>
class ParameterStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t, std::string init_spec) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        index_[name] = params_.size();
        params_.push_back({name, std::move(t), std::move(init_spec)});
        return params_.back().tensor;
    }

    Tensor<T>& add_uniform_fan_in(const std::string& name, Shape shape, Rng& rng) {
        const T bound = static_cast<T>(std::sqrt(1.0 / static_cast<double>(shape[0])));
        return add(name, Tensor<T>::uniform(shape, -bound, bound, rng),
                   "uniform(+-sqrt(1/fan_in))");
    }

    Tensor<T>& add_zeros(const std::string& name, Shape shape) {
        return add(name, Tensor<T>::zeros(std::move(shape)), "zeros");
    }

    Tensor<T>& add_query(const std::string& name, Shape shape, Rng& rng) {
        return add(name, Tensor<T>::normal(shape, T(0), T(0.02), rng), "normal(0,0.02)");
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return params_[it->second].tensor;
    }

    std::vector<Parameter<T>>& all() { return params_; }
    const std::vector<Parameter<T>>& all() const { return params_; }
    size_t size() const { return params_.size(); }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoint IO.
// ---------------------------------------------------------------------------

namespace detail {
template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else if constexpr (std::is_same_v<T, double>) return "f64";
    else return "unknown";
}
}  // namespace detail

class CheckpointWriter {
public:
    template <class T>
    void add_tensor(const std::string& name, const Shape& shape, const std::vector<T>& data) {
        Entry e;
        e.name = name;
        e.shape = shape;
        e.dtype = detail::dtype_name<T>();
        e.offset = blob_.size();
        const size_t bytes = data.size() * sizeof(T);
        blob_.resize(blob_.size() + bytes);
        std::memcpy(blob_.data() + e.offset, data.data(), bytes);
        entries_.push_back(std::move(e));
    }

    void add_meta(const std::string& key, const std::string& value) {
        meta_.emplace_back(key, value);
    }

    // Writes <stem>.manifest and <stem>.bin atomically (tmp + rename).
    void write(const std::string& stem) const {
        std::string manifest = "format=ibev-checkpoint-v1\n";
        manifest += "tensors=" + std::to_string(entries_.size()) + "\n";
        for (size_t i = 0; i < entries_.size(); ++i) {
            const auto& e = entries_[i];
            const std::string p = "tensor." + std::to_string(i) + ".";
            manifest += p + "name=" + e.name + "\n";
            std::string s;
            for (size_t d = 0; d < e.shape.size(); ++d)
                s += (d ? "x" : "") + std::to_string(e.shape[d]);
            manifest += p + "shape=" + s + "\n";
            manifest += p + "dtype=" + e.dtype + "\n";
            manifest += p + "offset=" + std::to_string(e.offset) + "\n";
        }
        for (const auto& [k, v] : meta_) manifest += "meta." + k + "=" + v + "\n";
        write_file(stem + ".manifest", manifest.data(), manifest.size());
        write_file(stem + ".bin", blob_.data(), blob_.size());
    }

private:
    struct Entry {
        std::string name;
        Shape shape;
        std::string dtype;
        size_t offset = 0;
    };

    static void write_file(const std::string& path, const void* data, size_t n) {
        const std::string tmp = path + ".tmp";
        {
            std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
            if (!os) throw IoError("cannot open for write: " + tmp);
            os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
            if (!os) throw IoError("write failed: " + tmp);
        }
        std::filesystem::rename(tmp, path);
    }

    std::vector<Entry> entries_;
    std::vector<std::pair<std::string, std::string>> meta_;
    std::vector<unsigned char> blob_;
};

class CheckpointReader {
public:
    explicit CheckpointReader(const std::string& stem) {
        const std::string mpath = stem + ".manifest";
        std::ifstream is(mpath);
        if (!is) throw IoError("cannot open checkpoint manifest: " + mpath);
        std::string line;
        std::map<std::string, std::string> kv;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#') continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw IoError("malformed manifest line: " + line);
            kv[line.substr(0, eq)] = line.substr(eq + 1);
        }
        if (kv["format"] != "ibev-checkpoint-v1")
            throw IoError("unsupported checkpoint format in " + mpath);
        const size_t n = std::stoull(kv.at("tensors"));
        for (size_t i = 0; i < n; ++i) {
            const std::string p = "tensor." + std::to_string(i) + ".";
            Entry e;
            e.name = kv.at(p + "name");
            e.dtype = kv.at(p + "dtype");
            e.offset = std::stoull(kv.at(p + "offset"));
            std::string s = kv.at(p + "shape");
            size_t pos = 0;
            while (pos < s.size()) {
                size_t x = s.find('x', pos);
                if (x == std::string::npos) x = s.size();
                e.shape.push_back(std::stoll(s.substr(pos, x - pos)));
                pos = x + 1;
            }
            index_[e.name] = entries_.size();
            entries_.push_back(std::move(e));
        }
        for (const auto& [k, v] : kv)
            if (k.rfind("meta.", 0) == 0) meta_[k.substr(5)] = v;

        std::ifstream bs(stem + ".bin", std::ios::binary);
        if (!bs) throw IoError("cannot open checkpoint blob: " + stem + ".bin");
        blob_.assign(std::istreambuf_iterator<char>(bs), std::istreambuf_iterator<char>());
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    const std::string& meta(const std::string& key) const {
        auto it = meta_.find(key);
        if (it == meta_.end()) throw IoError("checkpoint missing meta key: " + key);
        return it->second;
    }
    bool has_meta(const std::string& key) const { return meta_.count(key) != 0; }

    template <class T>
    Tensor<T> tensor(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw IoError("checkpoint missing tensor: " + name);
        const Entry& e = entries_[it->second];
        if (e.dtype != detail::dtype_name<T>())
            throw IoError("checkpoint dtype mismatch for " + name + ": file has " + e.dtype);
        const size_t count = static_cast<size_t>(shape_numel(e.shape));
        if (e.offset + count * sizeof(T) > blob_.size())
            throw IoError("checkpoint blob truncated at tensor " + name + " (offset " +
                          std::to_string(e.offset) + ")");
        std::vector<T> data(count);
        std::memcpy(data.data(), blob_.data() + e.offset, count * sizeof(T));
        return Tensor<T>::from(e.shape, std::move(data));
    }

    std::vector<std::string> tensor_names() const {
        std::vector<std::string> out;
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

private:
    struct Entry {
        std::string name;
        Shape shape;
        std::string dtype;
        size_t offset = 0;
    };
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
    std::map<std::string, std::string> meta_;
    std::vector<unsigned char> blob_;
};

}  // namespace ibev
