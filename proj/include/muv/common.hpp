#pragma once

#include <stdexcept>
#include <string>

namespace muv {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrKind { Usage = 2, Data = 3, Numeric = 4 };

class Error : public std::runtime_error {
public:
    Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrKind kind() const { return kind_; }

private:
    ErrKind kind_;
};

inline void require(bool cond, ErrKind kind, const std::string& msg) {
    if (!cond) throw Error(kind, msg);
}

}  // namespace muv
