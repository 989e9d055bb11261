#include "feduq/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace feduq::math {

static_assert(std::endian::native == std::endian::little,
              "ParamSet binary format assumes a little-endian host");

void ParamSet::add(const std::string& name, Tensor t) {
    if (has(name)) throw ConfigError("duplicate parameter name: " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(t));
}

Tensor& ParamSet::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return values_[it->second];
}

const Tensor& ParamSet::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return values_[it->second];
}

std::size_t ParamSet::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
}

std::size_t ParamSet::total_elements() const {
    std::size_t n = 0;
    for (const Tensor& t : values_) n += t.numel();
    return n;
}

bool ParamSet::same_schema(const ParamSet& o) const {
    if (names_ != o.names_) return false;
    for (std::size_t i = 0; i < values_.size(); ++i)
        if (values_[i].shape != o.values_[i].shape) return false;
    return true;
}

void ParamSet::save(const std::string& stem) const {
    nlohmann::json manifest;
    manifest["dtype"] = "f64le";
    nlohmann::json entries = nlohmann::json::array();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < names_.size(); ++i) {
        entries.push_back({{"name", names_[i]},
                           {"shape", values_[i].shape},
                           {"offset", offset}});
        offset += values_[i].numel() * sizeof(double);
    }
    manifest["entries"] = entries;
    manifest["total_bytes"] = offset;

    std::ofstream jf(stem + ".json");
    if (!jf) throw IoError("cannot write " + stem + ".json");
    jf << manifest.dump(2) << "\n";

    std::ofstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw IoError("cannot write " + stem + ".bin");
    for (const Tensor& t : values_)
        bf.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(double)));
}

ParamSet ParamSet::load(const std::string& stem) {
    std::ifstream jf(stem + ".json");
    if (!jf) throw IoError("cannot read " + stem + ".json");
    nlohmann::json manifest = nlohmann::json::parse(jf);
    if (manifest.at("dtype").get<std::string>() != "f64le")
        throw IoError("unsupported dtype in " + stem + ".json");

    std::ifstream bf(stem + ".bin", std::ios::binary);
    if (!bf) throw IoError("cannot read " + stem + ".bin");
    std::vector<char> raw((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
    if (raw.size() != manifest.at("total_bytes").get<std::size_t>())
        throw IoError("binary payload size mismatch for " + stem);

    ParamSet ps;
    for (const auto& e : manifest.at("entries")) {
        const auto shape = e.at("shape").get<std::vector<std::size_t>>();
        const std::size_t offset = e.at("offset").get<std::size_t>();
        std::size_t n = 1;
        for (std::size_t s : shape) n *= s;
        std::vector<double> data(n);
        std::memcpy(data.data(), raw.data() + offset, n * sizeof(double));
        ps.add(e.at("name").get<std::string>(), Tensor(shape, std::move(data)));
    }
    return ps;
}

}  // namespace feduq::math
