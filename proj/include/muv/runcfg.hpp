#pragma once

#include <map>
#include <string>
#include <vector>

#include "muv/common.hpp"
#include "muv/muvnet.hpp"

namespace muv {

// Flat key=value run configuration. Every key has a registered default;
// unknown keys are rejected on load/set. Lines starting with '#' are comments.
class RunConfig {
public:
    RunConfig();

    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);
    void apply_preset(const std::string& name);

    const std::string& gets(const std::string& key) const;
    int geti(const std::string& key) const;
    double getd(const std::string& key) const;
    bool getb(const std::string& key) const;

    // Writes the effective configuration, sorted by key.
    void echo(const std::string& path) const;

    ModelConfig model_config() const;

    static std::vector<std::string> preset_names();
    static std::map<std::string, std::string> preset_values(const std::string& name);

private:
    std::map<std::string, std::string> values_;
};

}  // namespace muv
