#pragma once

#include <string>

namespace multitalk {

// A child process (`/bin/sh -c command`) spoken to one line at a time: each
// request() writes a line to its stdin and reads one line from its stdout.
// Started lazily; stopped on destruction.
class LineProcess {
 public:
  explicit LineProcess(std::string command) : command_(std::move(command)) {}
  ~LineProcess();
  LineProcess(const LineProcess&) = delete;
  LineProcess& operator=(const LineProcess&) = delete;

  // Throws AdapterError if the process cannot be started, exits, or closes
  // its stdout before answering.
  std::string request(const std::string& line);
  void stop();
  const std::string& command() const { return command_; }

 private:
  void start();

  std::string command_;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

}  // namespace multitalk
