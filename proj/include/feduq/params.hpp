#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "feduq/tensor.hpp"

namespace feduq::math {

// Ordered, named collection of tensors: the federated unit of exchange.
// Insertion order is part of the contract; it fixes graph binding order,
// aggregation order and the serialized layout.
class ParamSet {
public:
    void add(const std::string& name, Tensor t);
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    const std::vector<std::string>& names() const { return names_; }
    std::size_t index_of(const std::string& name) const;
    std::size_t size() const { return names_.size(); }
    std::size_t total_elements() const;
    bool same_schema(const ParamSet& o) const;

    Tensor& operator[](std::size_t i) { return values_[i]; }
    const Tensor& operator[](std::size_t i) const { return values_[i]; }

    // JSON manifest (<stem>.json) + little-endian flat f64 binary (<stem>.bin).
    // Round-trips bit-exactly.
    void save(const std::string& stem) const;
    static ParamSet load(const std::string& stem);

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace feduq::math
