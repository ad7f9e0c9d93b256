#ifndef BRANCHCONNECT_LOG_H_
#define BRANCHCONNECT_LOG_H_

#include <functional>
#include <string>

namespace branchconnect {

using WarningSink = std::function<void(const std::string&)>;

/// Emits a warning through the installed sink (stderr by default).
void Warn(const std::string& message);
/// Replaces the sink and returns the previous one. Pass nullptr to restore stderr.
WarningSink SetWarningSink(WarningSink sink);

}  // namespace branchconnect

#endif  // BRANCHCONNECT_LOG_H_
