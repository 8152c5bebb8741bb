#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slidesurv/autodiff.hpp"
#include "slidesurv/types.hpp"

namespace slidesurv {

// Named model parameters in a stable registration order. The order defines
// optimizer-state alignment and checkpoint layout.
template <class Scalar>
class ParamStore {
public:
    struct Entry {
        std::string name;
        MatX<Scalar> value;
        bool trainable = true;
        bool decay = true;  // participates in decoupled weight decay
    };

    int add(std::string name, MatX<Scalar> value, bool trainable = true, bool decay = true) {
        entries_.push_back(Entry{std::move(name), std::move(value), trainable, decay});
        return static_cast<int>(entries_.size() - 1);
    }

    Entry& operator[](int i) { return entries_.at(static_cast<std::size_t>(i)); }
    const Entry& operator[](int i) const { return entries_.at(static_cast<std::size_t>(i)); }

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name == name) return static_cast<int>(i);
        return -1;
    }

    int size() const { return static_cast<int>(entries_.size()); }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::vector<Entry> entries_;
};

// Registers every entry as a leaf on the tape; index i of the result aligns
// with store index i.
template <class Scalar>
std::vector<ad::Var<Scalar>> bind_params(ad::Tape<Scalar>& tape, const ParamStore<Scalar>& store) {
    std::vector<ad::Var<Scalar>> vars;
    vars.reserve(static_cast<std::size_t>(store.size()));
    for (int i = 0; i < store.size(); ++i)
        vars.push_back(tape.leaf(store[i].value, store[i].trainable));
    return vars;
}

template <class Scalar>
nlohmann::json params_to_json(const ParamStore<Scalar>& store) {
    nlohmann::json arr = nlohmann::json::array();
    for (int i = 0; i < store.size(); ++i) {
        const auto& e = store[i];
        nlohmann::json t;
        t["name"] = e.name;
        t["rows"] = e.value.rows();
        t["cols"] = e.value.cols();
        std::vector<double> data(e.value.data(), e.value.data() + e.value.size());
        t["data"] = data;
        arr.push_back(std::move(t));
    }
    return arr;
}

template <class Scalar>
void params_from_json(const nlohmann::json& arr, ParamStore<Scalar>& store) {
    for (const auto& t : arr) {
        const int idx = store.find(t.at("name").get<std::string>());
        if (idx < 0)
            throw std::runtime_error("checkpoint: unknown parameter '" +
                                     t.at("name").get<std::string>() + "'");
        auto& e = store[idx];
        const auto rows = t.at("rows").get<Eigen::Index>();
        const auto cols = t.at("cols").get<Eigen::Index>();
        if (rows != e.value.rows() || cols != e.value.cols())
            throw std::runtime_error("checkpoint: shape mismatch for '" + e.name + "'");
        const auto data = t.at("data").get<std::vector<double>>();
        if (static_cast<Eigen::Index>(data.size()) != e.value.size())
            throw std::runtime_error("checkpoint: data length mismatch for '" + e.name + "'");
        for (std::size_t i = 0; i < data.size(); ++i)
            e.value.data()[i] = static_cast<Scalar>(data[i]);
    }
}

}  // namespace slidesurv
